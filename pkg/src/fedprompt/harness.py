"""Experiment front end: seeded runs, variant comparisons, ablation sweeps.

All rendered numbers are recomputable from the raw JSON-lines metrics;
files contain no timestamps so identical configs produce identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import attack as atk
from .config import ExperimentConfig, serialize_config
from .data import generate_domains
from .encoders import init_encoders
from .errors import ConfigError, ParameterError
from .federation import RunHistory, run_federated
from .prompts import VARIANT_MODES, VariantSpec, build_variant

SWEEP_AXES = ("alpha_mode", "prompt_length", "epochs_per_round", "visual_mode")


def _json_row(method: str, seed: int, row: dict) -> str:
    out = {
        "method": method,
        "seed": seed,
        "round": row["round"],
        "domain": row["domain"],
        "split": row["split"],
        "accuracy": row["accuracy"],
        "mean_loss": row["mean_loss"],
        "mean_true_domain_weight": (
            None if math.isnan(row["mean_true_domain_weight"]) else row["mean_true_domain_weight"]
        ),
    }
    return json.dumps(out, sort_keys=True)


def run_seed(cfg: ExperimentConfig, seed: int, checkpoint_dir: Optional[str] = None) -> RunHistory:
    """One full federated run for one trial seed."""
    dataset_spec, encoder_cfg = cfg.seeded(seed)
    dataset = generate_domains(dataset_spec)
    weights = init_encoders(encoder_cfg)
    return run_federated(dataset, weights, cfg.run_config(seed, checkpoint_dir=checkpoint_dir))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    histories: dict[int, RunHistory]

    def final_domain_accuracy(self) -> dict[int, float]:
        """Per-domain test accuracy at the final round, averaged over seeds."""
        acc: dict[int, list[float]] = {}
        for history in self.histories.values():
            for domain, value in history.final_accuracy("test").items():
                acc.setdefault(domain, []).append(value)
        return {d: float(np.mean(v)) for d, v in sorted(acc.items())}

    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.final_domain_accuracy().values())))

    def std_across_domains(self) -> float:
        return float(np.std(list(self.final_domain_accuracy().values())))

    def mean_final_true_domain_weight(self) -> float:
        vals = []
        for history in self.histories.values():
            last = max(r["round"] for r in history.rows)
            for r in history.rows:
                if r["round"] == last and r["split"] == "test":
                    vals.append(r["mean_true_domain_weight"])
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


def run_experiment_config(cfg: ExperimentConfig, out_dir: str) -> ExperimentResult:
    """Execute every seed, then write per-seed and merged metrics files."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    histories: dict[int, RunHistory] = {}
    for seed in cfg.seeds:
        checkpoint_dir = (
            os.path.join(out_dir, f"checkpoints_seed{seed}") if cfg.save_checkpoints else None
        )
        histories[seed] = run_seed(cfg, seed, checkpoint_dir=checkpoint_dir)
        with open(os.path.join(out_dir, f"metrics_seed{seed}.jsonl"), "w", encoding="utf-8") as fh:
            for row in histories[seed].rows:
                fh.write(_json_row(cfg.variant, seed, row) + "\n")

    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as fh:
        for seed in sorted(histories):
            for row in histories[seed].rows:
                fh.write(_json_row(cfg.variant, seed, row) + "\n")

    result = ExperimentResult(config=cfg, histories=histories)
    _write_summary_csv(os.path.join(out_dir, "summary.csv"), [(cfg.variant, result)], cfg.dataset.n_domains)
    some = histories[sorted(histories)[0]]
    with open(os.path.join(out_dir, "communication.json"), "w", encoding="utf-8") as fh:
        json.dump(some.communication, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "config_used.txt"), "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
    return result


def run_experiment(config_path: str, out_override: Optional[str] = None) -> ExperimentResult:
    from .config import load_config

    cfg = load_config(config_path)
    out_dir = out_override or os.environ.get("FEDPROMPT_OUTPUT_DIR") or cfg.output_dir
    return run_experiment_config(cfg, out_dir)


def _write_summary_csv(path: str, results: Sequence[tuple[str, ExperimentResult]], n_domains: int) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + [f"domain_{d}" for d in range(n_domains)] + ["avg"])
        for method, result in results:
            per_domain = result.final_domain_accuracy()
            row = [method] + [f"{per_domain.get(d, float('nan')):.6f}" for d in range(n_domains)]
            row.append(f"{result.mean_accuracy():.6f}")
            writer.writerow(row)


# ---------------------------------------------------------------------------
# variant comparison (ablation table shape)


def compare_variants(cfg: ExperimentConfig, variants: Sequence[str], out_dir: str) -> list[dict]:
    """One row per variant: mean accuracy over domains and seeds, std across domains."""
    if len(variants) < 2:
        raise ConfigError("compare requires at least two variants")
    for v in variants:
        if v not in VARIANT_MODES:
            raise ConfigError(f"unknown variant {v!r}")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    pairs = []
    for variant in variants:
        sub = replace(cfg, variant=variant)
        result = run_experiment_config(sub, os.path.join(out_dir, f"variant_{variant}"))
        pairs.append((variant, result))
        rows.append({
            "variant": variant,
            "mean_accuracy": result.mean_accuracy(),
            "std_across_domains": result.std_across_domains(),
        })
    _write_summary_csv(os.path.join(out_dir, "summary.csv"), pairs, cfg.dataset.n_domains)
    _write_table(
        os.path.join(out_dir, "comparison"),
        ["variant", "mean_accuracy", "std_across_domains"],
        [[r["variant"], f"{r['mean_accuracy']:.6f}", f"{r['std_across_domains']:.6f}"] for r in rows],
    )
    return rows


def _write_table(stem: str, header: list[str], rows: list[list[str]]) -> None:
    with open(stem + ".csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    with open(stem + ".txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# ablation sweeps (momentum modes, prompt length, communication frequency)


def _apply_axis(cfg: ExperimentConfig, axis: str, value: str) -> ExperimentConfig:
    if axis == "alpha_mode":
        if value == "train_all":
            return replace(cfg, train_all_text=True)
        try:
            alpha = float(value)
        except ValueError as exc:
            raise ConfigError(f"alpha_mode value {value!r} is neither a float nor 'train_all'") from exc
        return replace(cfg, alpha=alpha, train_all_text=False)
    if axis == "prompt_length":
        return replace(cfg, prompt_len=int(value))
    if axis == "epochs_per_round":
        return replace(cfg, epochs_per_round=float(value))
    if axis == "visual_mode":
        return replace(cfg, visual_update=value)
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence[str], out_dir: str) -> list[dict]:
    """Re-run the experiment per axis value and emit one table per axis."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep requires at least one value")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for value in values:
        sub = _apply_axis(cfg, axis, str(value))
        result = run_experiment_config(sub, os.path.join(out_dir, f"{axis}_{value}"))
        rows.append({
            "value": str(value),
            "mean_accuracy": result.mean_accuracy(),
            "std_across_domains": result.std_across_domains(),
        })
    _write_table(
        os.path.join(out_dir, f"sweep_{axis}"),
        [axis, "mean_accuracy", "std_across_domains"],
        [[r["value"], f"{r['mean_accuracy']:.6f}", f"{r['std_across_domains']:.6f}"] for r in rows],
    )
    return rows


# ---------------------------------------------------------------------------
# attack harness entry points


_CAPTURE_MAGIC = b"FPGC"
_CAPTURE_VERSION = 1
_CAPTURE_HEADER = struct.Struct("<4sI16siQIII")


def save_capture(capture: atk.GradientCapture, truth: Optional[np.ndarray], fh) -> None:
    patch_shape = capture.metadata.get("patch_shape", [0, 0])
    fh.write(_CAPTURE_HEADER.pack(
        _CAPTURE_MAGIC, _CAPTURE_VERSION,
        capture.variant.encode().ljust(16, b"\0"),
        int(capture.metadata.get("label", -1)),
        capture.parameter_count,
        int(patch_shape[0]), int(patch_shape[1]),
        1 if truth is not None else 0,
    ))
    fh.write(np.ascontiguousarray(capture.values, dtype="<f8").tobytes())
    if truth is not None:
        fh.write(np.ascontiguousarray(truth, dtype="<f8").tobytes())


def load_capture(fh) -> tuple[atk.GradientCapture, Optional[np.ndarray]]:
    header = fh.read(_CAPTURE_HEADER.size)
    if len(header) != _CAPTURE_HEADER.size:
        raise ConfigError("capture file truncated before header end")
    magic, version, variant_raw, label, count, p, dv, has_truth = _CAPTURE_HEADER.unpack(header)
    if magic != _CAPTURE_MAGIC:
        raise ConfigError(f"bad magic {magic!r} in capture file")
    if version != _CAPTURE_VERSION:
        raise ConfigError(f"unsupported capture file version {version}")
    raw = fh.read(count * 8)
    if len(raw) != count * 8:
        raise ConfigError("capture file truncated inside gradient values")
    values = np.frombuffer(raw, dtype="<f8").copy()
    truth = None
    if has_truth:
        raw = fh.read(p * dv * 8)
        if len(raw) != p * dv * 8:
            raise ConfigError("capture file truncated inside the true input")
        truth = np.frombuffer(raw, dtype="<f8").reshape(p, dv).copy()
    capture = atk.GradientCapture(
        values=values,
        param_shapes=[],
        variant=variant_raw.rstrip(b"\0").decode(),
        parameter_count=count,
        metadata={"label": label, "patch_shape": [p, dv]},
    )
    return capture, truth


def run_attack(
    cfg: ExperimentConfig,
    capture_path: Optional[str],
    out_dir: str,
    iters: int = 150,
    restarts: int = 2,
    save_capture_path: Optional[str] = None,
) -> dict:
    """Run the DLG harness against a prompt-gradient capture.

    Without ``capture_path`` a fresh capture is taken from a seeded sample
    of the configured model; the JSON-lines report carries the variant,
    budget, final objective, and cosine to the true input.
    """
    if iters < 1:
        raise ParameterError("attack iteration budget must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    seed = cfg.seeds[0]
    dataset_spec, encoder_cfg = cfg.seeded(seed)
    dataset = generate_domains(dataset_spec)
    weights = init_encoders(encoder_cfg)
    model = build_variant(
        VariantSpec(cfg.variant), weights,
        n_domains=dataset_spec.n_domains, prompt_len=cfg.prompt_len,
        owner_domain=0, tau_d=cfg.tau_d, init_seed=seed,
    )
    classes = list(range(dataset_spec.n_classes))

    if capture_path is not None:
        with open(capture_path, "rb") as fh:
            capture, truth = load_capture(fh)
        label = int(capture.metadata["label"])
    else:
        sample = dataset.train_for_domain(0)[0]
        truth = np.array(sample.patches)
        label = sample.class_id
        capture = atk.capture_prompt_gradients(model, truth, label, classes)
        if save_capture_path:
            with open(save_capture_path, "wb") as fh:
                save_capture(capture, truth, fh)

    grad_fn = atk.prompt_gradient_fn(model, label, classes)
    result = atk.dlg_reconstruct(
        capture, grad_fn,
        input_shape=(dataset_spec.patch_count, dataset_spec.d_v),
        iters=iters, seed=seed, restarts=restarts,
        true_input=truth, variant=cfg.variant,
    )
    report = {
        "variant": cfg.variant,
        "iters": iters,
        "final_objective": result.final_objective,
        "cosine_to_truth": result.cosine_to_truth,
    }
    with open(os.path.join(out_dir, "attack_report.jsonl"), "a", encoding="utf-8") as fh:
        fh.write(json.dumps(report, sort_keys=True) + "\n")
    np.save(os.path.join(out_dir, "reconstruction.npy"), result.reconstruction)
    return report


def decode_checkpoint(checkpoint_path: str) -> str:
    """Render the nearest-vocab decoding of a prompt checkpoint as text."""
    from .prompts import decode_prompt_nearest_words, load_prompts

    with open(checkpoint_path, "rb") as fh:
        model = load_prompts(fh)
    vocab = model.weights.vocab
    prompt_list = model._prompt_list()
    columns = [decode_prompt_nearest_words(p, vocab) for p in prompt_list]
    buf = io.StringIO()
    header = ["token"] + [f"prompt_{k}" for k in range(len(columns))]
    widths = [max(len(h), 8) for h in header]
    buf.write("  ".join(h.ljust(w) for h, w in zip(header, widths)) + "\n")
    rows = len(columns[0])
    for r in range(rows):
        cells = [str(r)] + [f"tok{columns[k][r]:03d}" for k in range(len(columns))]
        buf.write("  ".join(c.ljust(w) for c, w in zip(cells, widths)) + "\n")
    return buf.getvalue()
