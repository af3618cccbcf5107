"""Federated rounds: parallel local training, pass-through text aggregation,
visual-prompt averaging, and momentum loading of external prompts.

One round is ``train -> upload -> aggregate -> broadcast``; the broadcast
applies the exponential-moving-average rule to every external text prompt
(``new = alpha * old + (1 - alpha) * received``) before the next round's
local steps. Clients never share mutable state, so concurrent and
sequential execution must produce identical global prompts; that property
is part of the tested contract, not an accident.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import encoders as enc
from .autodiff import GradientTape
from .data import DomainDataset, SampleRecord, few_shot_subset
from .errors import (
    ConfigError,
    DataError,
    ParameterError,
    ProtocolError,
)
from .optim import make_optimizer
from .prompts import (
    LossConfig,
    PromptModel,
    VariantSpec,
    build_variant,
    save_prompts,
)

TEXT_MODES = ("owner", "train_all", "shared", "none")
VISUAL_MODES = ("average", "split", "split_momentum")


@dataclass(frozen=True)
class RoundSchedule:
    total_rounds: int = 100
    epochs_per_round: float = 1.0
    alpha: float = 0.99
    momentum_per_step: bool = False

    def validate(self) -> None:
        if self.total_rounds < 0:
            raise ConfigError("total_rounds must be >= 0")
        if self.epochs_per_round <= 0:
            raise ConfigError("epochs_per_round must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class RunConfig:
    variant: str = "adapt"
    prompt_len: int = 16
    tau_d: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adamw"
    optimizer_hp: dict = field(default_factory=dict)
    schedule: RoundSchedule = field(default_factory=RoundSchedule)
    batch_size: int = 8
    clients_per_domain: int = 1
    dirichlet_beta: float = 0.5
    train_all_text: bool = False
    visual_update: str = "average"
    seed: int = 0
    eval_every: int = 1
    few_shot_k: Optional[int] = None
    record_states: bool = False
    concurrent: bool = False
    checkpoint_dir: Optional[str] = None

    def validate(self) -> None:
        VariantSpec(self.variant)
        self.schedule.validate()
        self.loss.validate()
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.clients_per_domain < 1:
            raise ConfigError("clients_per_domain must be >= 1")
        if self.visual_update not in VISUAL_MODES:
            raise ConfigError(f"unknown visual_update mode {self.visual_update!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class ClientUpload:
    client_id: int
    domain_id: int
    text_slots: dict[int, np.ndarray]
    visual: Optional[np.ndarray]


@dataclass
class ClientState:
    client_id: int
    domain_id: int
    model: PromptModel
    samples: list[SampleRecord]
    optimizer: object
    received_external: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class ServerState:
    text_mode: str
    text_slots: list[np.ndarray]
    visual: Optional[np.ndarray]
    clients_per_domain: int = 1
    visual_update: str = "average"
    round: int = 0


@dataclass
class RoundSnapshot:
    round: int
    server_text: list[np.ndarray]
    server_visual: Optional[np.ndarray]
    uploads: list[ClientUpload]
    externals_before: dict[int, dict[int, np.ndarray]]
    externals_after: dict[int, dict[int, np.ndarray]]


@dataclass
class RunHistory:
    rows: list[dict]
    external_change: list[float]
    train_loss: list[dict[int, float]]
    snapshots: list[RoundSnapshot]
    communication: dict
    wall_time: float

    def final_accuracy(self, split: str = "test") -> dict[int, float]:
        best_round = max(r["round"] for r in self.rows)
        return {
            r["domain"]: r["accuracy"]
            for r in self.rows
            if r["round"] == best_round and r["split"] == split
        }

    def mean_final_accuracy(self, split: str = "test") -> float:
        per_domain = self.final_accuracy(split)
        return float(np.mean(list(per_domain.values())))


# ---------------------------------------------------------------------------
# partitioning


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    dataset: DomainDataset, clients_per_domain: int, beta: float, seed: int
) -> list[list[SampleRecord]]:
    """Split each domain's training data over sub-clients by Dirichlet draws.

    For every (domain, class) cell a proportion vector over the
    ``clients_per_domain`` sub-clients is drawn from Dirichlet(beta) with a
    cell-specific seeded generator, converted to counts by largest-remainder
    apportionment, and the cell's samples are assigned in dataset order.
    Returns ``n_domains * clients_per_domain`` slices, domain-major.
    """
    if beta <= 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    if clients_per_domain < 1:
        raise ParameterError("clients_per_domain must be >= 1")
    spec = dataset.spec
    slices: list[list[SampleRecord]] = [
        [] for _ in range(spec.n_domains * clients_per_domain)
    ]
    for domain in range(spec.n_domains):
        for cls in range(spec.n_classes):
            cell = [
                s for s in dataset.train
                if s.domain_id == domain and s.class_id == cls
            ]
            rng = np.random.default_rng(np.random.SeedSequence([seed, domain, cls, 0xD1]))
            props = rng.dirichlet(np.full(clients_per_domain, beta))
            counts = _largest_remainder_counts(props, len(cell))
            start = 0
            for j, count in enumerate(counts):
                slices[domain * clients_per_domain + j].extend(cell[start : start + int(count)])
                start += int(count)
    return slices


# ---------------------------------------------------------------------------
# per-client training


def _sample_stream(n: int, epochs: float, rng: np.random.Generator) -> np.ndarray:
    total = int(round(epochs * n))
    out: list[np.ndarray] = []
    got = 0
    while got < total:
        perm = rng.permutation(n)
        take = min(n, total - got)
        out.append(perm[:take])
        got += take
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _apply_step_momentum(client: ClientState, alpha: float) -> None:
    model = client.model
    if model.text_prompts is None or not client.received_external:
        return
    for k, received in client.received_external.items():
        tensor = model.text_prompts[k]
        tensor.data[...] = alpha * tensor.data + (1.0 - alpha) * received


def local_train(
    client: ClientState,
    epochs: float,
    classes: Sequence[int],
    batch_size: int = 8,
    rng: Optional[np.random.Generator] = None,
    momentum_per_step: bool = False,
    alpha: float = 0.99,
) -> tuple[ClientUpload, dict]:
    """Run the epoch fraction on this client's samples and return its upload.

    Each step encodes a batch, weights/fuses the per-domain class features,
    applies the loss, backpropagates into the trainable prompts only, and
    steps the optimizer. With ``epochs == 0`` the upload carries the
    client's current prompts unchanged.
    """
    if not client.samples:
        raise DataError(f"client {client.client_id} has an empty dataset")
    model = client.model
    stats = {"steps": 0, "mean_loss": float("nan"), "mean_true_domain_weight": float("nan")}
    if epochs > 0 and model.trainable_params():
        if rng is None:
            rng = np.random.default_rng()
        stream = _sample_stream(len(client.samples), epochs, rng)
        losses: list[float] = []
        weights_seen: list[float] = []
        for start in range(0, len(stream), batch_size):
            idx = stream[start : start + batch_size]
            batch = [client.samples[i] for i in idx]
            patches = np.stack([s.patches for s in batch])
            targets = np.array([s.class_id for s in batch], dtype=np.int64)
            with GradientTape() as tape:
                loss, step_stats = model.training_loss_batch(patches, targets, classes)
                tape.backward(loss)
            client.optimizer.step()
            if momentum_per_step:
                _apply_step_momentum(client, alpha)
            losses.append(float(loss.data))
            if not np.isnan(step_stats["true_domain_weight"]):
                weights_seen.append(step_stats["true_domain_weight"])
        stats["steps"] = len(losses)
        stats["mean_loss"] = float(np.mean(losses)) if losses else float("nan")
        if weights_seen:
            stats["mean_true_domain_weight"] = float(np.mean(weights_seen))
    return _make_upload(client), stats


def _make_upload(client: ClientState) -> ClientUpload:
    model = client.model
    text: dict[int, np.ndarray] = {}
    if model.text_prompts is not None:
        if model.train_all_text:
            text = {k: model.text_prompt_array(k) for k in range(len(model.text_prompts))}
        else:
            text = {model.owner_domain: model.text_prompt_array(model.owner_domain)}
    elif model.shared_prompt is not None and model.variant.federated:
        text = {0: np.array(model.shared_prompt.data)}
    visual = model.visual_prompt_array() if model.visual_prompts is not None else None
    return ClientUpload(
        client_id=client.client_id,
        domain_id=client.domain_id,
        text_slots=text,
        visual=visual,
    )


# ---------------------------------------------------------------------------
# server side


def momentum_load_external(client: ClientState, received: dict[int, np.ndarray], alpha: float) -> None:
    """EMA-update every external prompt; the owner prompt is untouched."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    model = client.model
    if model.text_prompts is None:
        raise ProtocolError("client model has no per-domain text prompts")
    owner = model.owner_domain
    if owner in received:
        raise ProtocolError(f"received prompts include the owner slot {owner}")
    expected = set(range(len(model.text_prompts))) - {owner}
    if set(received) != expected:
        raise ProtocolError(
            f"expected external slots {sorted(expected)}, got {sorted(received)}"
        )
    for k, value in received.items():
        tensor = model.text_prompts[k]
        tensor.data[...] = alpha * tensor.data + (1.0 - alpha) * value
    client.received_external = {k: np.array(v) for k, v in received.items()}


def _mean_exact(arrays: list[np.ndarray]) -> np.ndarray:
    """Element-wise mean that is bitwise pass-through for identical inputs."""
    first = arrays[0]
    if len(arrays) == 1 or all(np.array_equal(a, first) for a in arrays[1:]):
        return np.array(first)
    return np.mean(arrays, axis=0)


def aggregate(server: ServerState, uploads: Sequence[ClientUpload]) -> None:
    """Fold one round of uploads into the server state.

    Text slots are pass-through per domain (averaged only over same-domain
    sub-clients); visual prompts are element-wise averaged over every
    client. Increments the round counter.
    """
    by_domain: dict[int, list[ClientUpload]] = {}
    for up in uploads:
        by_domain.setdefault(up.domain_id, []).append(up)

    if server.text_mode == "owner":
        for domain in range(len(server.text_slots)):
            got = by_domain.get(domain, [])
            if len(got) != server.clients_per_domain:
                raise ProtocolError(
                    f"domain {domain}: expected {server.clients_per_domain} uploads, got {len(got)}"
                )
            server.text_slots[domain] = _mean_exact([up.text_slots[domain] for up in got])
    elif server.text_mode == "train_all":
        for domain in range(len(server.text_slots)):
            server.text_slots[domain] = _mean_exact([up.text_slots[domain] for up in uploads])
    elif server.text_mode == "shared":
        server.text_slots[0] = _mean_exact([up.text_slots[0] for up in uploads])

    if server.visual is not None:
        visuals = [up.visual for up in uploads if up.visual is not None]
        if len(visuals) != len(uploads):
            raise ProtocolError("some uploads are missing visual prompts")
        if server.visual_update == "average":
            server.visual = _mean_exact(visuals)
        else:
            # split modes: row k is owned by domain k's clients
            new_visual = np.array(server.visual)
            for domain in range(new_visual.shape[0]):
                rows = [up.visual[domain] for up in by_domain.get(domain, [])]
                if rows:
                    new_visual[domain] = _mean_exact(rows)
            server.visual = new_visual
    server.round += 1


def _broadcast(server: ServerState, clients: list[ClientState], cfg: RunConfig) -> tuple[float, dict, dict]:
    """Send the aggregated state to every client; returns EMA bookkeeping.

    Returns (mean external-prompt change magnitude, externals-before map,
    externals-after map); the maps are filled only when recording states.
    """
    alpha = cfg.schedule.alpha
    change_norms: list[float] = []
    before: dict[int, dict[int, np.ndarray]] = {}
    after: dict[int, dict[int, np.ndarray]] = {}
    for client in clients:
        model = client.model
        if model.text_prompts is not None:
            owner = model.owner_domain
            externals = {
                k: np.array(server.text_slots[k])
                for k in range(len(server.text_slots))
                if k != owner
            }
            if cfg.record_states:
                before[client.client_id] = {
                    k: model.text_prompt_array(k) for k in externals
                }
            prev = {k: model.text_prompt_array(k) for k in externals}
            if server.text_mode == "train_all":
                for k, value in externals.items():
                    model.set_text_prompt(k, value)
                client.received_external = externals
            else:
                momentum_load_external(client, externals, alpha)
            model.set_text_prompt(owner, server.text_slots[owner])
            for k in externals:
                change_norms.append(
                    float(np.linalg.norm(model.text_prompt_array(k) - prev[k]))
                )
            if cfg.record_states:
                after[client.client_id] = {
                    k: model.text_prompt_array(k) for k in externals
                }
        elif model.shared_prompt is not None and model.variant.federated:
            model.shared_prompt.data[...] = server.text_slots[0]
        if model.visual_prompts is not None and server.visual is not None:
            if cfg.visual_update == "split_momentum":
                current = model.visual_prompt_array()
                blended = alpha * current + (1.0 - alpha) * server.visual
                blended[client.domain_id] = server.visual[client.domain_id]
                model.set_visual_prompts(blended)
            else:
                model.set_visual_prompts(server.visual)
        model._fixed_text_cache.clear()
    mean_change = float(np.mean(change_norms)) if change_norms else 0.0
    return mean_change, before, after


# ---------------------------------------------------------------------------
# evaluation


def _evaluate_domain(model: PromptModel, samples: list[SampleRecord], classes,
                     batch_size: int = 128, feats=None):
    correct = 0
    losses: list[np.ndarray] = []
    weight_sum = 0.0
    weight_count = 0
    if feats is None:
        feats = model.class_text_features(classes)
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        patches = np.stack([s.patches for s in batch])
        targets = np.array([s.class_id for s in batch], dtype=np.int64)
        preds, _, w_arr, sims = model.classify_batch(patches, classes, feats=feats)
        correct += int((preds == targets).sum())
        losses.append(model.per_sample_losses(sims, targets, w_arr))
        if w_arr is not None:
            weight_sum += float(w_arr[:, model.owner_domain].sum())
            weight_count += len(batch)
    accuracy = correct / len(samples)
    mean_loss = float(np.concatenate(losses).mean())
    true_weight = weight_sum / weight_count if weight_count else float("nan")
    return accuracy, mean_loss, true_weight


def _eval_rows(round_idx: int, clients: list[ClientState], dataset: DomainDataset, classes) -> list[dict]:
    rows = []
    spec = dataset.spec
    seen: set[int] = set()
    for client in clients:
        domain = client.domain_id
        if domain in seen:
            continue
        seen.add(domain)
        feats = client.model.class_text_features(classes)
        for split_name, samples in (
            ("train", dataset.train_for_domain(domain)),
            ("test", dataset.test_for_domain(domain)),
        ):
            accuracy, mean_loss, true_weight = _evaluate_domain(
                client.model, samples, classes, feats=feats
            )
            rows.append({
                "round": round_idx,
                "domain": domain,
                "split": split_name,
                "accuracy": accuracy,
                "mean_loss": mean_loss,
                "mean_true_domain_weight": true_weight,
            })
    return rows


def communication_report(variant: VariantSpec, n: int, m: int, d_e: int, d_v: int) -> dict:
    """Float counts exchanged per client per round, plus the trainable total."""
    text_down = n * m * d_e if variant.has_domain_text_prompts else (
        m * d_e if variant.trains_text else 0
    )
    text_up = m * d_e if variant.trains_text else 0
    visual = n * d_v if variant.has_visual_prompts else 0
    return {
        "downlink_floats_per_client": text_down + visual,
        "uplink_floats_per_client": text_up + visual,
        "downlink_bytes_per_client": (text_down + visual) * 8,
        "uplink_bytes_per_client": (text_up + visual) * 8,
    }


# ---------------------------------------------------------------------------
# the full loop


def run_federated(dataset: DomainDataset, weights: enc.EncoderWeights, cfg: RunConfig) -> RunHistory:
    """Run T rounds of broadcast / parallel local training / aggregation.

    Deterministic for a fixed (dataset, weights, cfg.seed) regardless of
    whether clients execute concurrently.
    """
    cfg.validate()
    spec = dataset.spec
    variant = VariantSpec(cfg.variant)
    classes = list(range(spec.n_classes))
    if weights.config.vocab_size < spec.n_classes + 4:
        raise ConfigError("vocab_size must cover every class id plus the reserved context rows")
    if spec.d_v != weights.config.d_v or spec.patch_count != weights.config.patch_count:
        raise ConfigError(
            f"dataset patches [{spec.patch_count}, {spec.d_v}] do not match encoder "
            f"[{weights.config.patch_count}, {weights.config.d_v}]"
        )

    work = dataset
    if cfg.few_shot_k is not None:
        work = few_shot_subset(dataset, cfg.few_shot_k, seed=cfg.seed)

    if cfg.clients_per_domain > 1:
        slices = dirichlet_partition(work, cfg.clients_per_domain, cfg.dirichlet_beta, cfg.seed)
    else:
        slices = [work.train_for_domain(d) for d in range(spec.n_domains)]

    loss_cfg = cfg.loss
    clients: list[ClientState] = []
    for cid, samples in enumerate(slices):
        domain = cid // cfg.clients_per_domain
        model = build_variant(
            variant, weights, n_domains=spec.n_domains, prompt_len=cfg.prompt_len,
            owner_domain=domain, tau_d=cfg.tau_d, loss_cfg=loss_cfg,
            init_seed=cfg.seed, train_all_text=cfg.train_all_text,
        )
        params = model.trainable_params()
        optimizer = make_optimizer(cfg.optimizer, params, **cfg.optimizer_hp) if params else None
        clients.append(ClientState(
            client_id=cid, domain_id=domain, model=model,
            samples=list(samples), optimizer=optimizer,
        ))

    reference = clients[0].model
    server: Optional[ServerState] = None
    if variant.federated:
        if variant.has_domain_text_prompts:
            text_mode = "train_all" if cfg.train_all_text else "owner"
            text_slots = [reference.text_prompt_array(k) for k in range(spec.n_domains)]
            for client in clients:
                client.received_external = {
                    k: np.array(text_slots[k])
                    for k in range(spec.n_domains)
                    if k != client.domain_id
                }
        elif variant.trains_text:
            text_mode = "shared"
            text_slots = [np.array(reference.shared_prompt.data)]
        else:
            text_mode = "none"
            text_slots = []
        visual = reference.visual_prompt_array() if reference.visual_prompts is not None else None
        server = ServerState(
            text_mode=text_mode, text_slots=text_slots, visual=visual,
            clients_per_domain=cfg.clients_per_domain, visual_update=cfg.visual_update,
        )

    trainable = any(c.model.trainable_params() for c in clients)
    total_rounds = cfg.schedule.total_rounds if trainable else 0

    rows = _eval_rows(0, clients, work, classes)
    external_change: list[float] = []
    train_loss: list[dict[int, float]] = []
    snapshots: list[RoundSnapshot] = []
    started = time.perf_counter()

    def train_one(client: ClientState, round_idx: int):
        if not client.samples:
            # A Dirichlet draw can leave a sub-client without data; it still
            # participates with its current prompts (0-epoch behavior).
            return _make_upload(client), {
                "steps": 0, "mean_loss": float("nan"),
                "mean_true_domain_weight": float("nan"),
            }
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 0xC11E, client.client_id, round_idx])
        )
        return local_train(
            client, cfg.schedule.epochs_per_round, classes,
            batch_size=cfg.batch_size, rng=rng,
            momentum_per_step=cfg.schedule.momentum_per_step,
            alpha=cfg.schedule.alpha,
        )

    for round_idx in range(1, total_rounds + 1):
        if cfg.concurrent and len(clients) > 1:
            with ThreadPoolExecutor(max_workers=len(clients)) as pool:
                results = list(pool.map(lambda c: train_one(c, round_idx), clients))
        else:
            results = [train_one(c, round_idx) for c in clients]
        uploads = [r[0] for r in results]

        loss_by_domain: dict[int, list[float]] = {}
        for client, (_, stat) in zip(clients, results):
            if not np.isnan(stat["mean_loss"]):
                loss_by_domain.setdefault(client.domain_id, []).append(stat["mean_loss"])
        train_loss.append({d: float(np.mean(v)) for d, v in loss_by_domain.items()})

        change = 0.0
        before: dict = {}
        after: dict = {}
        if server is not None:
            aggregate(server, uploads)
            change, before, after = _broadcast(server, clients, cfg)
        external_change.append(change)

        if cfg.record_states:
            snapshots.append(RoundSnapshot(
                round=round_idx,
                server_text=[np.array(t) for t in (server.text_slots if server else [])],
                server_visual=np.array(server.visual) if server is not None and server.visual is not None else None,
                uploads=uploads,
                externals_before=before,
                externals_after=after,
            ))

        if cfg.checkpoint_dir:
            os.makedirs(cfg.checkpoint_dir, exist_ok=True)
            for client in clients:
                path = os.path.join(
                    cfg.checkpoint_dir, f"client{client.client_id}_round{round_idx}.bin"
                )
                with open(path, "wb") as fh:
                    save_prompts(client.model, fh)

        if round_idx % cfg.eval_every == 0 or round_idx == total_rounds:
            rows.extend(_eval_rows(round_idx, clients, work, classes))

    comm = communication_report(
        variant, spec.n_domains, cfg.prompt_len, weights.config.d_e, weights.config.d_v
    )
    comm["trainable_parameter_count"] = reference.parameter_count()
    return RunHistory(
        rows=rows,
        external_change=external_change,
        train_loss=train_loss,
        snapshots=snapshots,
        communication=comm,
        wall_time=time.perf_counter() - started,
    )
