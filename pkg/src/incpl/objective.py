"""Context-aware test-time loss.

Class probabilities come from temperature-scaled cosine similarity between
the prompted image embedding and the class text embeddings. The loss is the
Shannon entropy of the unlabeled test sample's distribution plus a
lambda-weighted sum of cross-entropy terms on the labeled in-context
examples, all under one shared visual prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .backbone import ImageSample
from .errors import ConfigurationError, NumericalFailureError
from .prompts import ClassVocabulary, PromptState, VisualPrompt, build_text_input, perturb_pixels

_NORM_FLOOR = 1e-30


@dataclass
class ClassProbabilities:
    """Softmax class distribution with the logits it came from."""

    probs: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        s = float(self.probs.sum())
        if not math.isfinite(s) or abs(s - 1.0) > 1e-9:
            raise NumericalFailureError(f"probabilities sum to {s!r}, not 1")


@dataclass
class LossBreakdown:
    entropy_term: float
    supervised_terms: list[float]
    lam: float
    total: float

    def to_dict(self) -> dict:
        return {
            "entropy_term": self.entropy_term,
            "supervised_terms": list(self.supervised_terms),
            "lambda": self.lam,
            "total": self.total,
        }


def scaled_cosine_logits(img_feats: torch.Tensor, txt_feats: torch.Tensor, tau: float,
                         sample_id: str | None = None) -> torch.Tensor:
    """tau * cosine(image, class) for every (image, class) pair."""
    for feats, kind in ((img_feats, "image"), (txt_feats, "text")):
        norms = torch.linalg.vector_norm(feats, dim=-1)
        if not bool(torch.isfinite(feats).all()) or bool((norms < _NORM_FLOOR).any()):
            raise NumericalFailureError(f"degenerate {kind} embedding norm", sample_id=sample_id)
    img = img_feats / torch.linalg.vector_norm(img_feats, dim=-1, keepdim=True)
    txt = txt_feats / torch.linalg.vector_norm(txt_feats, dim=-1, keepdim=True)
    return tau * img @ txt.T


def entropy_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """Shannon entropy (natural log) of softmax(logits) for one logit row."""
    logp = torch.log_softmax(logits, dim=-1)
    return -(torch.exp(logp) * logp).sum()


def cross_entropy_from_logits(logits: torch.Tensor, gold: int) -> torch.Tensor:
    """-log softmax(logits)[gold] for one logit row."""
    if not 0 <= gold < logits.shape[-1]:
        raise IndexError(f"gold index {gold} out of range for {logits.shape[-1]} classes")
    return -torch.log_softmax(logits, dim=-1)[gold]


def vision_embeddings(
    backend,
    pixels: torch.Tensor,
    visual_tokens: torch.Tensor | None = None,
    pixel_prompt: VisualPrompt | None = None,
    counters=None,
    trace: list | None = None,
) -> torch.Tensor:
    """Embed a (B, C, H, W) pixel batch under the current visual prompt."""
    b = pixels.shape[0]
    if pixel_prompt is not None:
        pixels = perturb_pixels(pixels, pixel_prompt)
    cls, patches = backend.patchify_batch(pixels)
    if visual_tokens is not None and visual_tokens.shape[0] > 0:
        seq = torch.cat([visual_tokens.unsqueeze(0).expand(b, -1, -1), cls, patches], dim=1)
    else:
        seq = torch.cat([cls, patches], dim=1)
    if counters is not None:
        counters.vision_calls += b
    if trace is not None:
        tag = pixel_prompt.values if pixel_prompt is not None else visual_tokens
        trace.extend([id(tag)] * b)
    return backend.encode_image_batch(seq)


def class_embeddings(
    backend,
    p_t: torch.Tensor,
    vocab: ClassVocabulary,
    counters=None,
) -> torch.Tensor:
    """Text-encode every class under the given text prompt tokens: (C, d)."""
    seqs = [build_text_input(p_t, c, vocab, backend) for c in range(vocab.size)]
    if counters is not None:
        counters.text_calls += vocab.size
        counters.text_batches += 1
    return backend.encode_text_batch(seqs)


def combined_loss_terms(
    backend,
    text_feats: torch.Tensor,
    x_pixels: torch.Tensor | None,
    ctx_pixels: torch.Tensor | None,
    ctx_labels: Sequence[int | None],
    lam: float,
    visual_tokens: torch.Tensor | None = None,
    pixel_prompt: VisualPrompt | None = None,
    include_entropy: bool = True,
    counters=None,
    trace: list | None = None,
    sample_id: str | None = None,
) -> tuple[torch.Tensor, LossBreakdown, torch.Tensor | None]:
    """Build the loss graph; returns (total, value breakdown, test-sample logits).

    The test sample and the context examples go through separate encoder
    invocations under the *same* prompt tensors, so the unlabeled term's
    subgraph is identical whether or not examples accompany it.
    """
    tau = backend.config.temperature
    dtype = backend.dtype
    total = torch.zeros((), dtype=dtype)
    entropy_term = torch.zeros((), dtype=dtype)
    x_logits = None
    if x_pixels is not None and include_entropy:
        f = vision_embeddings(backend, x_pixels, visual_tokens, pixel_prompt, counters, trace)
        x_logits = scaled_cosine_logits(f, text_feats, tau, sample_id)[0]
        entropy_term = entropy_from_logits(x_logits)
        total = total + entropy_term
    sup_terms: list[torch.Tensor] = []
    if ctx_pixels is not None and ctx_pixels.shape[0] > 0:
        g = vision_embeddings(backend, ctx_pixels, visual_tokens, pixel_prompt, counters, trace)
        ctx_logits = scaled_cosine_logits(g, text_feats, tau, sample_id)
        for i, label in enumerate(ctx_labels):
            if label is None:
                continue
            sup_terms.append(cross_entropy_from_logits(ctx_logits[i], label))
        if sup_terms:
            total = total + lam * torch.stack(sup_terms).sum()
    if not torch.isfinite(total):
        raise NumericalFailureError(f"non-finite loss {float(total.detach())!r}", sample_id=sample_id)
    breakdown = LossBreakdown(
        entropy_term=float(entropy_term.detach()),
        supervised_terms=[float(t.detach()) for t in sup_terms],
        lam=lam,
        total=float(total.detach()),
    )
    return total, breakdown, x_logits


# -- public value-level operations -------------------------------------------


def class_probabilities(
    image: ImageSample,
    p_v: torch.Tensor | VisualPrompt | None,
    p_t: torch.Tensor,
    vocab: ClassVocabulary,
    backend,
) -> ClassProbabilities:
    """Class distribution for one image under the given prompts."""
    image.validate(backend.config)
    visual_tokens, pixel_prompt = None, None
    if isinstance(p_v, VisualPrompt):
        pixel_prompt = p_v if p_v.is_pixel else None
        if pixel_prompt is None:
            raise NumericalFailureError("token prompts must be materialized tensors here", image.id)
    elif p_v is not None:
        visual_tokens = p_v
    with torch.no_grad():
        pixels = torch.from_numpy(np.ascontiguousarray(image.pixels)).to(backend.dtype).unsqueeze(0)
        f = vision_embeddings(backend, pixels, visual_tokens, pixel_prompt)
        t = class_embeddings(backend, p_t, vocab)
        logits = scaled_cosine_logits(f, t, backend.config.temperature, image.id)[0]
        probs = torch.softmax(logits, dim=-1)
    return ClassProbabilities(
        probs=probs.cpu().numpy().astype(np.float64),
        logits=logits.cpu().numpy().astype(np.float64),
    )


def entropy_loss(p: ClassProbabilities) -> float:
    """Shannon entropy, natural log; zero-probability terms contribute zero."""
    probs = np.asarray(p.probs, dtype=np.float64)
    terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return float(-terms.sum())


def supervised_loss(p: ClassProbabilities, gold: int) -> float:
    """Cross-entropy against a one-hot gold label."""
    if not 0 <= gold < len(p.probs):
        raise IndexError(f"gold index {gold} out of range for {len(p.probs)} classes")
    return float(-np.log(p.probs[gold]))


def combined_loss(
    x_t: ImageSample,
    context,
    prompts: PromptState,
    theta,
    lam: float,
    backend,
    vocab: ClassVocabulary,
    include_entropy: bool = True,
) -> LossBreakdown:
    """Value-level combined loss for one test sample plus its context set."""
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    with torch.no_grad():
        pix = torch.from_numpy(np.ascontiguousarray(x_t.pixels)).to(backend.dtype).unsqueeze(0)
        pairs = list(context.pairs) if context is not None else []
        if pairs:
            ctx_pixels = torch.stack(
                [torch.from_numpy(np.ascontiguousarray(p.sample.pixels)).to(backend.dtype) for p in pairs]
            )
            ctx_labels = [p.label for p in pairs]
        else:
            ctx_pixels, ctx_labels = None, []
        visual_tokens = None if prompts.visual.is_pixel else prompts.visual_tokens(theta)
        pixel_prompt = prompts.visual if prompts.visual.is_pixel else None
        text_feats = class_embeddings(backend, prompts.text.tokens, vocab)
        _, breakdown, _ = combined_loss_terms(
            backend, text_feats, pix, ctx_pixels, ctx_labels, lam,
            visual_tokens=visual_tokens, pixel_prompt=pixel_prompt,
            include_entropy=include_entropy, sample_id=x_t.id,
        )
    return breakdown
