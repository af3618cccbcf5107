"""Gradient-inversion harness: DLG-style reconstruction plus an analytic
sanity oracle for linear layers.

The reconstruction minimizes ``||grad(dummy) - grad(observed)||^2`` over a
dummy input with derivative-free coordinate descent (the tensor core has
no second-order gradients); accepted steps never increase the objective.
The analytic oracle exploits the outer-product structure of a linear
layer's weight gradient and gates trust in the attack implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Tensor
from .errors import ConfigError, DegenerateInputError, ParameterError
from .prompts import PromptModel


@dataclass
class GradientCapture:
    """Flattened gradient of every trainable parameter for one step."""

    values: np.ndarray
    param_shapes: list[tuple[int, ...]]
    variant: str
    parameter_count: int
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.values.shape != (self.parameter_count,):
            raise ConfigError(
                f"capture length {self.values.shape} != parameter count {self.parameter_count}"
            )


def _flatten_grads(params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([p.grad.reshape(-1) for p in params])


# ---------------------------------------------------------------------------
# linear-layer reference model


class LinearClassifier:
    """Minimal ``logits = x @ W + b`` model used to sanity-check the attack."""

    def __init__(self, in_dim: int, n_classes: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11EA]))
        self.w = Tensor(rng.normal(0.0, in_dim**-0.5, (in_dim, n_classes)), requires_grad=True)
        self.b = Tensor(np.zeros(n_classes), requires_grad=True)
        self.in_dim = in_dim
        self.n_classes = n_classes

    def params(self) -> list[Tensor]:
        return [self.w, self.b]

    def loss(self, x: Tensor, label: int) -> Tensor:
        logits = ad.add(
            ad.reshape(ad.matmul(ad.reshape(x, (1, self.in_dim)), self.w), (self.n_classes,)),
            self.b,
        )
        return ad.cross_entropy_loss(logits, label)

    def gradient(self, x: np.ndarray, label: int) -> np.ndarray:
        ad.zero_grads(self.params())
        with GradientTape() as tape:
            loss = self.loss(Tensor(x), label)
            tape.backward(loss)
        out = _flatten_grads(self.params())
        ad.zero_grads(self.params())
        return out


def capture_linear_gradients(model: LinearClassifier, x: np.ndarray, label: int) -> GradientCapture:
    values = model.gradient(x, label)
    shapes = [p.shape for p in model.params()]
    return GradientCapture(
        values=values,
        param_shapes=shapes,
        variant="linear",
        parameter_count=values.size,
        metadata={"label": int(label), "in_dim": model.in_dim, "n_classes": model.n_classes},
    )


def linear_leak_oracle(capture: GradientCapture) -> np.ndarray:
    """Recover the input of a linear layer analytically, unit-normalized.

    ``dL/dW`` is the outer product of the input with the logit error, so
    any class column with a non-negligible bias gradient gives the input
    back exactly as ``dW[:, c] / db[c]``.
    """
    capture.validate()
    in_dim = capture.metadata["in_dim"]
    n_classes = capture.metadata["n_classes"]
    dw = capture.values[: in_dim * n_classes].reshape(in_dim, n_classes)
    db = capture.values[in_dim * n_classes :]
    col = int(np.argmax(np.abs(db)))
    if abs(db[col]) <= 1e-9:
        raise DegenerateInputError("all bias gradients vanish; nothing to invert")
    x = dw[:, col] / db[col]
    norm = np.linalg.norm(x)
    if norm <= 1e-12:
        raise DegenerateInputError("recovered input has zero norm")
    return x / norm


# ---------------------------------------------------------------------------
# prompt-model captures


def capture_prompt_gradients(
    model: PromptModel, patches: np.ndarray, class_id: int, classes: Sequence[int]
) -> GradientCapture:
    """Gradient of the training loss w.r.t. the trainable prompts only."""
    params = model.trainable_params()
    if not params:
        raise ConfigError(f"variant {model.variant.mode!r} has no trainable parameters")
    ad.zero_grads(params)
    with GradientTape() as tape:
        loss, _ = model.training_loss_batch(
            patches[None], np.array([class_id], dtype=np.int64), classes
        )
        tape.backward(loss)
    values = _flatten_grads(params)
    ad.zero_grads(params)
    return GradientCapture(
        values=values,
        param_shapes=[p.shape for p in params],
        variant=model.variant.mode,
        parameter_count=values.size,
        metadata={"label": int(class_id), "patch_shape": list(patches.shape)},
    )


def prompt_gradient_fn(model: PromptModel, class_id: int, classes: Sequence[int]) -> Callable:
    def fn(patches: np.ndarray) -> np.ndarray:
        return capture_prompt_gradients(model, patches, class_id, classes).values

    return fn


# ---------------------------------------------------------------------------
# the attack itself


@dataclass
class DlgResult:
    reconstruction: np.ndarray
    final_objective: float
    initial_objective: float
    cosine_to_truth: Optional[float]
    objective_trace: list[float]
    iterations: int
    failed: bool


def _objective(grad_fn, dummy: np.ndarray, observed: np.ndarray) -> float:
    diff = grad_fn(dummy) - observed
    return float(diff @ diff)


def dlg_reconstruct(
    capture: GradientCapture,
    grad_fn: Callable[[np.ndarray], np.ndarray],
    input_shape: tuple[int, ...],
    iters: int,
    seed: int,
    restarts: int = 2,
    true_input: Optional[np.ndarray] = None,
    variant: Optional[str] = None,
) -> DlgResult:
    """Coordinate-descent gradient matching with random restarts.

    ``iters`` counts coordinate proposals per restart; accepted proposals
    strictly decrease the objective, so the recorded trace is
    non-increasing. Restart results merge by best final objective with the
    earliest restart winning ties.
    """
    if iters < 1:
        raise ParameterError(f"iteration budget must be >= 1, got {iters}")
    if restarts < 1:
        raise ParameterError(f"restarts must be >= 1, got {restarts}")
    if variant is not None and capture.variant != variant:
        raise ConfigError(
            f"capture variant {capture.variant!r} does not match model variant {variant!r}"
        )
    capture.validate()
    observed = capture.values
    if not np.any(observed):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD16]))
        dummy = rng.normal(0.0, 1.0, input_shape)
        obj = _objective(grad_fn, dummy, observed)
        return DlgResult(
            reconstruction=dummy,
            final_objective=obj,
            initial_objective=obj,
            cosine_to_truth=_cosine(dummy, true_input),
            objective_trace=[obj],
            iterations=0,
            failed=True,
        )

    best: Optional[DlgResult] = None
    size = int(np.prod(input_shape))
    for restart in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD16, restart]))
        dummy = rng.normal(0.0, 1.0, size)
        obj = _objective(grad_fn, dummy.reshape(input_shape), observed)
        trace = [obj]
        steps = np.full(size, 0.5)
        for it in range(iters):
            coord = int(rng.integers(size))
            improved = False
            for sign in (1.0, -1.0):
                candidate = dummy.copy()
                candidate[coord] += sign * steps[coord]
                cand_obj = _objective(grad_fn, candidate.reshape(input_shape), observed)
                if cand_obj < obj:
                    dummy, obj = candidate, cand_obj
                    steps[coord] *= 1.5
                    improved = True
                    break
            if not improved:
                steps[coord] *= 0.5
            trace.append(obj)
        result = DlgResult(
            reconstruction=dummy.reshape(input_shape),
            final_objective=obj,
            initial_objective=trace[0],
            cosine_to_truth=_cosine(dummy.reshape(input_shape), true_input),
            objective_trace=trace,
            iterations=iters,
            failed=False,
        )
        if best is None or result.final_objective < best.final_objective:
            best = result
    return best


def _cosine(a: np.ndarray, b: Optional[np.ndarray]) -> Optional[float]:
    if b is None:
        return None
    av = a.reshape(-1)
    bv = b.reshape(-1)
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na <= 1e-12 or nb <= 1e-12:
        return 0.0
    return float(av @ bv / (na * nb))
