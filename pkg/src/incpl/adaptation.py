"""Per-sample test-time adaptation loop.

For every test sample: reset the prompts, draw an in-context set, take
optimizer step(s) on the prompt parameters against the context-aware loss,
predict, record, and move on. Four modes are supported:

* visual-only: step(s) on the visual prompt offset plus the token net.
* text-only:   one step on the text prompt; visual prompt and token net frozen.
* concurrent:  one joint step on visual offset, text prompt, and token net.
* cyclic:      visual phase first, then a text phase with everything else
               frozen (two phases total).

The token net and its optimizer moments persist across the stream; prompt
leaves and their optimizer state are recreated from scratch every sample.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .backbone import ImageSample
from .context_store import (
    LABEL_MODES,
    ORACLE_MODES,
    STRATEGIES,
    CandidatePool,
    ContextSet,
    SelectionStrategy,
    apply_label_mode,
    build_pool,
    sample_context,
)
from .data import DatasetManifest, ImageStore, unified_class_list
from .errors import ConfigurationError, NumericalFailureError
from .objective import (
    ClassProbabilities,
    LossBreakdown,
    class_embeddings,
    combined_loss_terms,
    cross_entropy_from_logits,
    entropy_from_logits,
    scaled_cosine_logits,
    vision_embeddings,
)
from .prompts import (
    DEFAULT_TEMPLATE,
    VARIANTS,
    ClassVocabulary,
    PromptState,
    build_vocabulary,
    init_prompt_state,
    reset_prompts,
)
from .report import RunReport, SampleRecord
from .token_net import TokenNetParams, init_token_net

MODES = ("visual-only", "text-only", "concurrent", "cyclic")

log = logging.getLogger("incpl")


@dataclass
class AdaptationConfig:
    mode: str = "visual-only"
    lam: float = 0.4
    lr: float = 5e-3
    visual_steps: int = 1
    cycle_steps: int = 2
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    seed: int = 0
    use_entropy: bool = True  # False drops the unlabeled entropy term (task-only ablation)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.lr}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.visual_steps < 0:
            raise ConfigurationError(f"visual_steps must be >= 0, got {self.visual_steps}")
        if self.mode == "cyclic" and self.cycle_steps != 2:
            raise ConfigurationError(f"cyclic mode runs exactly 2 phases, got cycle_steps={self.cycle_steps}")
        if self.optimizer != "adamw":
            raise ConfigurationError(f"only the adamw optimizer is supported, got {self.optimizer!r}")


@dataclass
class StreamConfig:
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    n_context: int = 5
    strategy: str = "random"
    label_mode: str = "gold"
    template: str = DEFAULT_TEMPLATE
    variant: str = "language-aware"
    pool_seed: int = 0
    ablation: bool = False
    patched_side: int | None = None
    padded_width: int | None = None

    def validate(self) -> None:
        self.adaptation.validate()
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigurationError(f"label mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if self.label_mode in ORACLE_MODES and not self.ablation:
            raise ConfigurationError(
                f"label mode {self.label_mode!r} peeks at gold labels; pass ablation=True (--ablation)"
            )
        if self.n_context < 0:
            raise ConfigurationError(f"n_context must be >= 0, got {self.n_context}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class Counters:
    vision_calls: int = 0
    text_calls: int = 0
    text_batches: int = 0

    def to_dict(self) -> dict:
        return {
            "vision_calls": self.vision_calls,
            "text_calls": self.text_calls,
            "text_batches": self.text_batches,
        }

    def delta_from(self, other: "Counters") -> dict:
        return {
            "vision_calls": self.vision_calls - other.vision_calls,
            "text_calls": self.text_calls - other.text_calls,
            "text_batches": self.text_batches - other.text_batches,
        }

    def snapshot(self) -> "Counters":
        return Counters(**self.to_dict())


@dataclass
class Prediction:
    class_index: int
    probs: ClassProbabilities
    loss_trace: list


class TextFeatureCache:
    """Class-embedding cache keyed by the exact bytes of the text prompt.

    Invalidated whenever the text prompt changes. With INCPL_CACHE_DIR set,
    entries are also persisted to disk keyed by backend digest, vocabulary,
    and prompt bytes; disk hits skip the encoder (and its counters).
    """

    def __init__(self, backend_digest: str, vocab_fingerprint: str):
        self._scope = f"{backend_digest}|{vocab_fingerprint}"
        self._key: bytes | None = None
        self._feats: torch.Tensor | None = None

    def _disk_path(self, key: bytes) -> Path | None:
        cache_dir = os.environ.get("INCPL_CACHE_DIR")
        if not cache_dir:
            return None
        h = hashlib.sha256(self._scope.encode("utf-8") + key).hexdigest()
        return Path(cache_dir) / f"textfeats_{h}.npy"

    def get(self, backend, p_t: torch.Tensor, vocab: ClassVocabulary, counters: Counters) -> torch.Tensor:
        key = p_t.detach().cpu().numpy().tobytes()
        if self._key == key:
            return self._feats
        path = self._disk_path(key)
        if path is not None and path.exists():
            feats = torch.from_numpy(np.load(path)).to(backend.dtype)
        else:
            with torch.no_grad():
                feats = class_embeddings(backend, p_t.detach(), vocab, counters)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                np.save(path, feats.cpu().numpy())
        self._key, self._feats = key, feats
        return feats


@dataclass
class AdaptationState:
    prompts: PromptState
    theta: TokenNetParams
    opt_theta: torch.optim.AdamW | None
    counters: Counters = field(default_factory=Counters)
    step_counter: int = 0
    text_cache: TextFeatureCache | None = None
    loss_trace: list = field(default_factory=list)
    visual_phase_done: bool = False
    last_prompt_ids: set = field(default_factory=set)


def _make_optimizer(leaves: list[torch.Tensor], cfg: AdaptationConfig) -> torch.optim.AdamW | None:
    params = [p for p in leaves if p.numel() > 0]
    if not params:
        return None
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def init_adaptation_state(
    backend,
    vocab: ClassVocabulary,
    cfg: StreamConfig,
    theta: TokenNetParams | None = None,
) -> AdaptationState:
    if theta is None:
        theta = init_token_net(backend.config.d_l, backend.config.d_v, cfg.adaptation.seed, dtype=backend.dtype)
    theta.W.requires_grad_(True)
    theta.b.requires_grad_(True)
    prompts = init_prompt_state(
        backend, theta,
        template=cfg.template, variant=cfg.variant, seed=cfg.adaptation.seed,
        patched_side=cfg.patched_side, padded_width=cfg.padded_width,
    )
    opt_theta = _make_optimizer([theta.W, theta.b], cfg.adaptation)
    return AdaptationState(
        prompts=prompts,
        theta=theta,
        opt_theta=opt_theta,
        text_cache=TextFeatureCache(backend.weight_digest(), vocab.fingerprint()),
    )


def _pixels_of(sample: ImageSample, backend) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(sample.pixels)).to(backend.dtype).unsqueeze(0)


def _context_tensors(context: ContextSet | None, backend) -> tuple[torch.Tensor | None, list]:
    if context is None or context.size == 0:
        return None, []
    pixels = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(p.sample.pixels)).to(backend.dtype) for p in context.pairs]
    )
    return pixels, [p.label for p in context.pairs]


def _zero_grads(leaves: list[torch.Tensor]) -> None:
    for leaf in leaves:
        leaf.grad = None


def adapt_visual(
    x_t: ImageSample,
    context: ContextSet | None,
    state: AdaptationState,
    cfg: AdaptationConfig,
    backend,
    vocab: ClassVocabulary,
) -> AdaptationState:
    """Visual phase: update the visual prompt (and token net) with P_t frozen."""
    if cfg.mode == "text-only":
        raise ConfigurationError("text-only mode does not permit a visual phase")
    visual = state.prompts.visual
    theta_live = visual.uses_translator()
    prompt_leaves = visual.trainable_leaves()
    opt_prompt = _make_optimizer(prompt_leaves, cfg)
    x_pixels = _pixels_of(x_t, backend)
    ctx_pixels, ctx_labels = _context_tensors(context, backend)
    for _ in range(cfg.visual_steps):
        text_feats = state.text_cache.get(backend, state.prompts.text.tokens, vocab, state.counters)
        trace: list = []
        visual_tokens = None if visual.is_pixel else state.prompts.visual_tokens(state.theta, live_theta=theta_live)
        total, breakdown, _ = combined_loss_terms(
            backend, text_feats,
            x_pixels, ctx_pixels, ctx_labels, cfg.lam,
            visual_tokens=visual_tokens,
            pixel_prompt=visual if visual.is_pixel else None,
            include_entropy=cfg.use_entropy,
            counters=state.counters, trace=trace, sample_id=x_t.id,
        )
        state.loss_trace.append(breakdown)
        state.last_prompt_ids = set(trace)
        _zero_grads(prompt_leaves + [state.theta.W, state.theta.b])
        if total.requires_grad:
            total.backward()
        if opt_prompt is not None:
            opt_prompt.step()
        if theta_live and state.opt_theta is not None:
            state.opt_theta.step()
        state.step_counter += 1
    state.visual_phase_done = True
    return state


def adapt_text(
    x_t: ImageSample,
    context: ContextSet | None,
    state: AdaptationState,
    cfg: AdaptationConfig,
    backend,
    vocab: ClassVocabulary,
) -> AdaptationState:
    """Text phase: one update to P_t with the visual prompt and token net frozen.

    Image embeddings are constants here (nothing on the vision side depends
    on P_t), so they are computed without a graph; the gradient enters only
    through the class text embeddings.
    """
    if cfg.mode == "cyclic" and not state.visual_phase_done:
        raise ConfigurationError("cyclic mode runs the visual phase before the text phase")
    p_t = state.prompts.text.tokens
    opt_text = _make_optimizer([p_t], cfg)
    visual = state.prompts.visual
    x_pixels = _pixels_of(x_t, backend)
    ctx_pixels, ctx_labels = _context_tensors(context, backend)
    with torch.no_grad():
        visual_tokens = None if visual.is_pixel else state.prompts.visual_tokens(state.theta)
        trace: list = []
        f_x = vision_embeddings(
            backend, x_pixels, visual_tokens,
            visual if visual.is_pixel else None,
            state.counters, trace,
        ) if cfg.use_entropy else None
        f_ctx = (
            vision_embeddings(
                backend, ctx_pixels, visual_tokens,
                visual if visual.is_pixel else None,
                state.counters, trace,
            )
            if ctx_pixels is not None
            else None
        )
    text_feats = class_embeddings(backend, p_t, vocab, state.counters)
    tau = backend.config.temperature
    total = torch.zeros((), dtype=backend.dtype)
    entropy_term = torch.zeros((), dtype=backend.dtype)
    if f_x is not None:
        entropy_term = entropy_from_logits(scaled_cosine_logits(f_x, text_feats, tau, x_t.id)[0])
        total = total + entropy_term
    sup_terms: list[torch.Tensor] = []
    if f_ctx is not None:
        ctx_logits = scaled_cosine_logits(f_ctx, text_feats, tau, x_t.id)
        for i, label in enumerate(ctx_labels):
            if label is None:
                continue
            sup_terms.append(cross_entropy_from_logits(ctx_logits[i], label))
        if sup_terms:
            total = total + cfg.lam * torch.stack(sup_terms).sum()
    if not torch.isfinite(total):
        raise NumericalFailureError(f"non-finite loss {float(total.detach())!r}", sample_id=x_t.id)
    state.loss_trace.append(
        LossBreakdown(
            entropy_term=float(entropy_term.detach()),
            supervised_terms=[float(t.detach()) for t in sup_terms],
            lam=cfg.lam,
            total=float(total.detach()),
        )
    )
    state.last_prompt_ids = set(trace)
    _zero_grads([p_t])
    if total.requires_grad:
        total.backward()
    if opt_text is not None:
        opt_text.step()
    state.step_counter += 1
    return state


def adapt_concurrent(
    x_t: ImageSample,
    context: ContextSet | None,
    state: AdaptationState,
    cfg: AdaptationConfig,
    backend,
    vocab: ClassVocabulary,
) -> AdaptationState:
    """One joint step on visual offset, text prompt, and token net."""
    visual = state.prompts.visual
    theta_live = visual.uses_translator()
    p_t = state.prompts.text.tokens
    prompt_leaves = visual.trainable_leaves() + [p_t]
    opt_prompt = _make_optimizer(prompt_leaves, cfg)
    x_pixels = _pixels_of(x_t, backend)
    ctx_pixels, ctx_labels = _context_tensors(context, backend)
    text_feats = class_embeddings(backend, p_t, vocab, state.counters)
    trace: list = []
    visual_tokens = None if visual.is_pixel else state.prompts.visual_tokens(state.theta, live_theta=theta_live)
    total, breakdown, _ = combined_loss_terms(
        backend, text_feats,
        x_pixels, ctx_pixels, ctx_labels, cfg.lam,
        visual_tokens=visual_tokens,
        pixel_prompt=visual if visual.is_pixel else None,
        include_entropy=cfg.use_entropy,
        counters=state.counters, trace=trace, sample_id=x_t.id,
    )
    state.loss_trace.append(breakdown)
    state.last_prompt_ids = set(trace)
    _zero_grads(prompt_leaves + [state.theta.W, state.theta.b])
    if total.requires_grad:
        total.backward()
    if opt_prompt is not None:
        opt_prompt.step()
    if theta_live and state.opt_theta is not None:
        state.opt_theta.step()
    state.step_counter += 1
    state.visual_phase_done = True
    return state


def predict(
    x_t: ImageSample,
    state: AdaptationState,
    vocab: ClassVocabulary,
    backend,
) -> Prediction:
    """Argmax class under the current prompts; lowest index wins ties."""
    with torch.no_grad():
        visual = state.prompts.visual
        visual_tokens = None if visual.is_pixel else state.prompts.visual_tokens(state.theta)
        f = vision_embeddings(
            backend, _pixels_of(x_t, backend), visual_tokens,
            visual if visual.is_pixel else None, state.counters,
        )
        text_feats = state.text_cache.get(backend, state.prompts.text.tokens, vocab, state.counters)
        logits = scaled_cosine_logits(f, text_feats, backend.config.temperature, x_t.id)[0]
        probs = torch.softmax(logits, dim=-1)
    probs_np = probs.cpu().numpy().astype(np.float64)
    return Prediction(
        class_index=int(np.argmax(probs_np)),
        probs=ClassProbabilities(probs=probs_np, logits=logits.cpu().numpy().astype(np.float64)),
        loss_trace=list(state.loss_trace),
    )


def _adapt_sample(
    x_t: ImageSample,
    context: ContextSet | None,
    state: AdaptationState,
    cfg: AdaptationConfig,
    backend,
    vocab: ClassVocabulary,
) -> None:
    if cfg.mode == "visual-only":
        adapt_visual(x_t, context, state, cfg, backend, vocab)
    elif cfg.mode == "text-only":
        adapt_text(x_t, context, state, cfg, backend, vocab)
    elif cfg.mode == "concurrent":
        adapt_concurrent(x_t, context, state, cfg, backend, vocab)
    else:  # cyclic: first visual then textual prompts
        adapt_visual(x_t, context, state, cfg, backend, vocab)
        adapt_text(x_t, context, state, cfg, backend, vocab)


def run_stream(
    backend,
    test_manifest: DatasetManifest,
    labeled_manifest: DatasetManifest,
    cfg: StreamConfig,
    theta: TokenNetParams | None = None,
) -> RunReport:
    """Online evaluation over the test manifest, one sample at a time.

    Per-sample failures are logged and scored with the unadapted prediction;
    the token net is rolled back so a failed sample leaves no trace beyond
    its report record.
    """
    cfg.validate()
    names = unified_class_list(test_manifest, labeled_manifest)
    class_to_index = {name: i for i, name in enumerate(names)}
    vocab = build_vocabulary(backend, names)
    store = ImageStore()
    pool = build_pool(labeled_manifest, cfg.pool_seed, class_to_index, store)
    if cfg.label_mode != "no-examples" and cfg.n_context > pool.size:
        raise ConfigurationError(f"n_context={cfg.n_context} exceeds pool size {pool.size}")
    state = init_adaptation_state(backend, vocab, cfg, theta=theta)
    rng = np.random.default_rng(cfg.adaptation.seed)
    strategy = SelectionStrategy(kind=cfg.strategy)
    labeled_by_class: dict[int, list] = {}

    def oracle_lookup(class_index: int) -> list:
        if class_index not in labeled_by_class:
            name = names[class_index]
            labeled_by_class[class_index] = [
                store.get(r) for r in labeled_manifest.records if r.class_name == name
            ]
        return labeled_by_class[class_index]

    report = RunReport(
        config=_config_echo(backend, test_manifest, labeled_manifest, cfg, pool, names),
        weight_digest_before=backend.weight_digest(),
        theta_digest_before=state.theta.digest(),
    )
    for record in test_manifest.records:
        gold = class_to_index[record.class_name]
        sample = store.get(record)
        before = state.counters.snapshot()
        reset_prompts(state.prompts, state.theta)
        state.loss_trace = []
        state.visual_phase_done = False
        theta_backup = state.theta.clone()
        opt_backup = copy.deepcopy(state.opt_theta.state_dict()) if state.opt_theta is not None else None
        failure = None
        context: ContextSet | None = None
        try:
            if cfg.label_mode == "no-examples" or cfg.n_context == 0:
                context = ContextSet(pairs=[], strategy=cfg.strategy, label_mode=cfg.label_mode)
            else:
                context = sample_context(pool, cfg.n_context, strategy, rng)
                context = apply_label_mode(
                    context, cfg.label_mode,
                    test_gold=gold if cfg.label_mode in ORACLE_MODES else None,
                    rng=rng, n_classes=len(names), oracle_lookup=oracle_lookup,
                )
            _adapt_sample(sample, context, state, cfg.adaptation, backend, vocab)
        except NumericalFailureError as exc:
            failure = str(exc)
            log.warning("sample %s: adaptation failed (%s); scoring unadapted", record.path, exc)
            with torch.no_grad():
                state.theta.W.copy_(theta_backup.W)
                state.theta.b.copy_(theta_backup.b)
            if state.opt_theta is not None and opt_backup is not None:
                state.opt_theta.load_state_dict(opt_backup)
            reset_prompts(state.prompts, state.theta)
            state.loss_trace = []
        try:
            pred = predict(sample, state, vocab, backend)
        except NumericalFailureError as exc:
            log.warning("sample %s: even the unadapted prediction failed (%s)", record.path, exc)
            failure = f"{failure}; " if failure else ""
            failure += f"prediction failed: {exc}"
            pred = None
        correct = pred is not None and pred.class_index == gold
        report.samples.append(
            SampleRecord(
                id=sample.id,
                gold=gold,
                gold_name=record.class_name,
                predicted=pred.class_index if pred else -1,
                predicted_name=names[pred.class_index] if pred else "",
                correct=bool(correct),
                probs=[float(p) for p in pred.probs.probs] if pred else [],
                loss_trace=[b.to_dict() for b in state.loss_trace],
                context_ids=[p.source_id for p in context.pairs] if context else [],
                context_labels=[p.label for p in context.pairs] if context else [],
                counters=state.counters.delta_from(before),
                theta_digest=state.theta.digest(),
                failed=failure is not None,
                failure=failure,
            )
        )
        report.total += 1
        report.correct += int(correct)
    report.weight_digest_after = backend.weight_digest()
    report.theta_digest_after = state.theta.digest()
    report.counters = state.counters.to_dict()
    return report


def _config_echo(
    backend,
    test_manifest: DatasetManifest,
    labeled_manifest: DatasetManifest,
    cfg: StreamConfig,
    pool: CandidatePool,
    names: list[str],
) -> dict:
    stream = asdict(cfg)
    adaptation = stream.pop("adaptation")
    return {
        "backend": {
            **{k: getattr(backend.config, k) for k in (
                "d_v", "d_l", "M", "C_img", "H", "W", "n_layers", "temperature", "seed",
            )},
            "precision": getattr(backend, "precision", "float64"),
        },
        "adaptation": adaptation,
        "stream": stream,
        "test_manifest": str(test_manifest.source) if test_manifest.source else None,
        "labeled_manifest": str(labeled_manifest.source) if labeled_manifest.source else None,
        "vocabulary": list(names),
        "pool_records": pool.record_indices(),
    }
