"""Dataset ingestion, synthetic task generation, and experiment matrices.

The synthetic task plants its class signal by construction: per-class
prototype images are gradient-optimized (the frozen backend is
input-differentiable) until the encoder classifies them as their class
names, then pulled toward mid-gray by the separation factor and blurred
with patch-structured noise. The two knobs give smooth control over where
zero-shot accuracy lands between chance and perfect, which every ablation
here relies on.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adaptation import MODES, AdaptationConfig, StreamConfig, run_stream
from .backbone import BackendConfig, ImageSample, ToyBackend
from .data import DatasetManifest, load_manifest, write_manifest
from .errors import ConfigurationError
from .objective import class_embeddings, scaled_cosine_logits, vision_embeddings
from .prompts import DEFAULT_TEMPLATE, VARIANTS, build_vocabulary, init_text_prompt
from .report import SUMMARY_FIELDS, RunReport, summary_row

log = logging.getLogger("incpl")

# Single-word class names for synthetic tasks (one text token each).
CLASS_NAME_WORDS = [
    "amber", "basil", "cobalt", "dune", "ember", "fjord", "garnet", "heron",
    "indigo", "jasper", "kelp", "lotus", "maple", "nectar", "onyx", "pearl",
    "quartz", "raven", "saffron", "tulip", "umber", "violet", "walnut",
    "xenon", "yarrow", "zephyr",
]

MATRIX_AXES = ("n_context", "label-mode", "strategy", "prompt-variant", "component", "mode")
DEFAULT_N_CONTEXT_SWEEP = (1, 3, 5, 7, 9, 11, 13, 15, 17, 19)
LABEL_MODE_GRID = ("no-examples", "none", "random", "same", "gold", "oracle")
COMPONENT_GRID = ("wo-u", "wo-s", "cu")


PLANT_STEPS = 80
PLANT_LR = 0.05


@dataclass
class SyntheticTaskSpec:
    n_classes: int = 8
    samples_per_class: int = 25
    cluster_separation: float = 0.3
    noise_scale: float = 0.4
    seed: int = 0
    labeled_fraction: float = 0.2

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.n_classes}")
        if self.samples_per_class < 2:
            raise ConfigurationError(f"need at least 2 samples per class, got {self.samples_per_class}")
        if self.cluster_separation <= 0:
            raise ConfigurationError(f"cluster separation must be > 0, got {self.cluster_separation}")
        if self.noise_scale < 0:
            raise ConfigurationError(f"noise scale must be >= 0, got {self.noise_scale}")
        if not 0 < self.labeled_fraction < 1:
            raise ConfigurationError(f"labeled fraction must be in (0, 1), got {self.labeled_fraction}")

    @property
    def labeled_per_class(self) -> int:
        return max(1, round(self.labeled_fraction * self.samples_per_class))


def synthetic_class_names(n: int) -> list[str]:
    names = list(CLASS_NAME_WORDS[:n])
    names.extend(f"class{i}" for i in range(len(names), n))
    return names


def zero_shot_predictions(
    backend,
    samples: list[ImageSample],
    vocab,
    template: str = DEFAULT_TEMPLATE,
) -> tuple[list[int], np.ndarray]:
    """Raw backend predictions: template text prompt, no visual prompt."""
    p_t = init_text_prompt(backend, template).tokens.detach()
    with torch.no_grad():
        text_feats = class_embeddings(backend, p_t, vocab)
        preds, rows = [], []
        for sample in samples:
            pixels = torch.from_numpy(np.ascontiguousarray(sample.pixels)).to(backend.dtype).unsqueeze(0)
            f = vision_embeddings(backend, pixels, None)
            logits = scaled_cosine_logits(f, text_feats, backend.config.temperature, sample.id)[0]
            probs = torch.softmax(logits, dim=-1).cpu().numpy().astype(np.float64)
            preds.append(int(np.argmax(probs)))
            rows.append(probs)
    return preds, np.stack(rows)


def zero_shot_accuracy(backend, manifest: DatasetManifest, template: str = DEFAULT_TEMPLATE) -> float:
    from .data import load_image

    vocab = build_vocabulary(backend, manifest.class_list)
    index = {name: i for i, name in enumerate(manifest.class_list)}
    samples = [load_image(r) for r in manifest.records]
    preds, _ = zero_shot_predictions(backend, samples, vocab, template)
    golds = [index[r.class_name] for r in manifest.records]
    return sum(p == g for p, g in zip(preds, golds)) / len(golds)


def generate_synthetic(
    spec: SyntheticTaskSpec,
    out_dir: str | Path,
    backend_config: BackendConfig | None = None,
    precision: str = "float64",
    max_attempts: int = 10,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Write a synthetic labeled/test split whose zero-shot accuracy is sane.

    Regenerates with a derived seed until the frozen backend's zero-shot
    accuracy on the test split lands strictly between chance and 100%.
    """
    spec.validate()
    cfg = backend_config or BackendConfig()
    backend = ToyBackend(cfg, precision=precision)
    out_dir = Path(out_dir)
    names = synthetic_class_names(spec.n_classes)
    vocab = build_vocabulary(backend, names)
    p_t = init_text_prompt(backend, DEFAULT_TEMPLATE).tokens.detach()
    with torch.no_grad():
        text_feats = class_embeddings(backend, p_t, vocab)

    for attempt in range(max_attempts):
        effective_seed = spec.seed + 1009 * attempt
        rng = np.random.default_rng(effective_seed)
        protos = _plant_prototypes(backend, text_feats, spec.n_classes, rng)
        protos = np.clip(0.5 + spec.cluster_separation * (protos - 0.5), 0.0, 1.0)
        # Patch-aligned block noise actually perturbs the encoder (iid pixel
        # noise mostly cancels inside the patch projection), so it carries
        # most of the noise budget.
        g = cfg.grid
        ph, pw = cfg.patch_shape
        shape = (spec.n_classes, spec.samples_per_class, cfg.C_img)
        blocks = np.kron(rng.standard_normal(shape + (g, g)), np.ones((ph, pw)))
        speckle = rng.standard_normal(shape + (cfg.H, cfg.W))
        images = np.clip(
            protos[:, None] + spec.noise_scale * (blocks + 0.25 * speckle), 0.0, 1.0
        )
        k = spec.labeled_per_class
        samples = [
            ImageSample(pixels=images[c, i], id=f"{names[c]}_{i:03d}")
            for c in range(spec.n_classes)
            for i in range(spec.samples_per_class)
        ]
        golds = [c for c in range(spec.n_classes) for _ in range(spec.samples_per_class)]
        is_test = [i % spec.samples_per_class >= k for i in range(len(samples))]
        test_samples = [s for s, t in zip(samples, is_test) if t]
        test_golds = [g for g, t in zip(golds, is_test) if t]
        preds, _ = zero_shot_predictions(backend, test_samples, vocab)
        acc = sum(p == g for p, g in zip(preds, test_golds)) / len(test_golds)
        if 1.0 / spec.n_classes < acc < 1.0:
            return _write_task(out_dir, spec, cfg, precision, names, samples, golds, is_test,
                               effective_seed, attempt, acc)
        log.warning("synthetic attempt %d: zero-shot accuracy %.4f out of bounds, reseeding", attempt, acc)
    raise ConfigurationError(
        f"synthetic task unreachable: zero-shot sanity bound failed {max_attempts} times for {spec}"
    )


def _plant_prototypes(backend, text_feats: torch.Tensor, n_classes: int, rng) -> np.ndarray:
    """Gradient-plant one prototype image per class under the frozen encoder.

    Starts from seeded uniform noise and minimizes the classification
    cross-entropy of prototype k against class k, projecting back into
    [0, 1] after every step. Weights are never touched; only pixels move.
    """
    cfg = backend.config
    x = torch.from_numpy(
        rng.random((n_classes, cfg.C_img, cfg.H, cfg.W))
    ).to(backend.dtype).requires_grad_(True)
    opt = torch.optim.Adam([x], lr=PLANT_LR)
    targets = torch.arange(n_classes)
    for _ in range(PLANT_STEPS):
        feats = vision_embeddings(backend, x, None)
        logits = scaled_cosine_logits(feats, text_feats, cfg.temperature)
        loss = torch.nn.functional.cross_entropy(logits, targets)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            x.clamp_(0.0, 1.0)
    return x.detach().cpu().numpy()


def _write_task(out_dir, spec, cfg, precision, names, samples, golds, is_test,
                effective_seed, attempt, acc) -> tuple[DatasetManifest, DatasetManifest]:
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    labeled_entries, test_entries = [], []
    for sample, gold, test in zip(samples, golds, is_test):
        rel = f"images/{sample.id}.npy"
        np.save(out_dir / rel, sample.pixels)
        (test_entries if test else labeled_entries).append((rel, names[gold]))
    write_manifest(labeled_entries, out_dir / "labeled.jsonl")
    write_manifest(test_entries, out_dir / "test.jsonl")
    (out_dir / "task.json").write_text(
        json.dumps(
            {
                "spec": dataclasses.asdict(spec),
                "backend": dataclasses.asdict(cfg) | {"precision": precision},
                "effective_seed": effective_seed,
                "attempts": attempt + 1,
                "zero_shot_accuracy": acc,
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    labeled = load_manifest(out_dir / "labeled.jsonl", split="labeled-pool")
    test = load_manifest(out_dir / "test.jsonl", split="test")
    return labeled, test


# -- experiment matrices -------------------------------------------------------


@dataclass
class MatrixResult:
    axis: str
    reports: dict[str, RunReport] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    ordering_warning: str | None = None

    @property
    def cells(self) -> list[str]:
        return list(self.reports) + list(self.errors)


def _cell_configs(base: StreamConfig, axis: str, values, seeds) -> list[tuple[str, StreamConfig]]:
    def derive(**kw) -> StreamConfig:
        ad_kw = kw.pop("adaptation", {})
        adaptation = dataclasses.replace(base.adaptation, **ad_kw)
        return dataclasses.replace(base, adaptation=adaptation, **kw)

    cells: list[tuple[str, StreamConfig]] = []
    if axis == "n_context":
        for v in values or DEFAULT_N_CONTEXT_SWEEP:
            cells.append((f"n_context={v}", derive(n_context=int(v))))
    elif axis == "label-mode":
        for mode in values or LABEL_MODE_GRID:
            for s in seeds:
                key = f"label={mode}" + (f",seed={s}" if len(seeds) > 1 else "")
                cells.append((key, derive(label_mode=mode, ablation=True, adaptation={"seed": s})))
    elif axis == "strategy":
        for kind in values or ("random", "definition"):
            for s in seeds:
                key = f"strategy={kind}" + (f",seed={s}" if len(seeds) > 1 else "")
                cells.append((key, derive(strategy=kind, adaptation={"seed": s})))
    elif axis == "prompt-variant":
        for v in values or VARIANTS:
            cells.append((f"variant={v}", derive(variant=v)))
    elif axis == "component":
        for comp in values or COMPONENT_GRID:
            if comp == "cu":
                cells.append(("component=cu", derive()))
            elif comp == "wo-u":
                cells.append(("component=wo-u", derive(adaptation={"use_entropy": False})))
            elif comp == "wo-s":
                cells.append(("component=wo-s", derive(label_mode="no-examples")))
            else:
                raise ConfigurationError(f"unknown component cell {comp!r}")
    elif axis == "mode":
        for m in values or MODES:
            cells.append((f"mode={m}", derive(adaptation={"mode": m})))
    else:
        raise ConfigurationError(f"axis must be one of {MATRIX_AXES}, got {axis!r}")
    return cells


def run_matrix(
    backend,
    test_manifest: DatasetManifest,
    labeled_manifest: DatasetManifest,
    base: StreamConfig,
    axis: str,
    values=None,
    seeds=(0,),
    out_dir: str | Path | None = None,
) -> MatrixResult:
    """One stream per cell along the chosen axis; per-cell failures recorded."""
    result = MatrixResult(axis=axis)
    for key, cfg in _cell_configs(base, axis, values, tuple(seeds)):
        try:
            result.reports[key] = run_stream(backend, test_manifest, labeled_manifest, cfg)
        except Exception as exc:  # cell failures must not stop the matrix
            log.warning("matrix cell %s failed: %s", key, exc)
            result.errors[key] = str(exc)
    if axis == "label-mode":
        result.ordering_warning = check_label_ordering(result)
    if out_dir is not None:
        emit_report(result.reports, out_dir, errors=result.errors)
    return result


def check_label_ordering(result: MatrixResult) -> str | None:
    """Fig-style sanity: mean accuracy should order oracle >= gold >= random.

    Empirical claim, so a violation is a warning rather than a failure.
    """
    means = {}
    for mode in ("oracle", "gold", "random"):
        accs = [
            r.accuracy
            for key, r in result.reports.items()
            if key.startswith(f"label={mode}") and r.accuracy is not None
        ]
        if accs:
            means[mode] = sum(accs) / len(accs)
    if len(means) < 3:
        return None
    if means["oracle"] >= means["gold"] >= means["random"]:
        return None
    msg = (
        "label-mode mean ordering violated: "
        f"oracle={means['oracle']:.4f}, gold={means['gold']:.4f}, random={means['random']:.4f}"
    )
    log.warning(msg)
    return msg


def _safe_name(key: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", key)


def emit_report(
    reports: dict[str, RunReport],
    out_dir: str | Path,
    formats: tuple[str, ...] = ("json", "csv"),
    errors: dict[str, str] | None = None,
) -> list[Path]:
    """Write one JSON file per report plus a CSV summary row per report."""
    if not reports and not errors:
        raise ConfigurationError("emit_report needs at least one report")
    for fmt in formats:
        if fmt not in ("json", "csv"):
            raise ConfigurationError(f"format must be json or csv, got {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if "json" in formats:
        for key in sorted(reports):
            path = out_dir / f"{_safe_name(key)}.json"
            reports[key].write(path)
            written.append(path)
    if "csv" in formats:
        path = out_dir / "summary.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
            writer.writeheader()
            for key in sorted(reports):
                writer.writerow(summary_row(key, reports[key]))
            for key in sorted(errors or {}):
                writer.writerow({"cell": key, "accuracy": "", "correct": 0, "total": 0,
                                 "vision_calls": 0, "text_calls": 0, "text_batches": 0,
                                 "weight_digest": f"error: {errors[key]}"})
        written.append(path)
    return written


def rerun_from_echo(config: dict) -> RunReport:
    """Re-run a stream from a report's config echo (self-reproduction check)."""
    backend_echo = dict(config["backend"])
    precision = backend_echo.pop("precision", "float64")
    backend = ToyBackend(BackendConfig(**backend_echo), precision=precision)
    test = load_manifest(config["test_manifest"], split="test")
    labeled = load_manifest(config["labeled_manifest"], split="labeled-pool")
    cfg = StreamConfig(adaptation=AdaptationConfig(**config["adaptation"]), **config["stream"])
    return run_stream(backend, test, labeled, cfg)
