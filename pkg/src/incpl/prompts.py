"""Prompt construction and per-sample prompt state.

Covers the language-aware visual prompt (text prompt tokens pushed through
the token net) plus the baseline prompt families it is compared against:
generic-language (random text-space vectors through the token net),
token-random (free visual tokens), and the pixel-space patched/padded
perturbations.

Token-space visual prompts are parameterized as ``base + delta`` where the
base is re-derived from the translator at every reset and ``delta`` is the
free per-sample offset the optimizer moves. This keeps the initialization
inside the translator's image (delta starts at zero) while letting both the
prompt and the translator receive gradients in the same step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .backbone import ImageSample, PatchTokens, TEXT_MAX_LEN
from .errors import ConfigurationError, PromptKindError, ShapeMismatchError
from .token_net import TokenNetParams, translate_with

TOKEN_ORIGINS = ("language-aware", "generic-language", "token-random")
PIXEL_ORIGINS = ("patched", "padded")
VARIANTS = TOKEN_ORIGINS + PIXEL_ORIGINS

DEFAULT_TEMPLATE = "a photo of a"


def tokenize(text: str) -> list[str]:
    """Whitespace word tokenizer shared by templates and class names."""
    return text.lower().split()


@dataclass
class ClassVocabulary:
    """Ordered class names with their frozen embedded token runs."""

    names: list[str]
    token_runs: list[torch.Tensor]  # per class: (k_c, d_l)

    @property
    def size(self) -> int:
        return len(self.names)

    def fingerprint(self) -> str:
        return "|".join(self.names)


def build_vocabulary(backend, names: list[str]) -> ClassVocabulary:
    if len(names) < 1:
        raise ConfigurationError("vocabulary needs at least one class")
    runs = []
    for name in names:
        words = tokenize(name)
        if not words:
            raise ConfigurationError(f"class name {name!r} has no tokens")
        runs.append(backend.embed_words(words))
    return ClassVocabulary(names=list(names), token_runs=runs)


@dataclass
class TextPrompt:
    tokens: torch.Tensor  # (n_p, d_l), the live optimization leaf
    source_text: str


def init_text_prompt(backend, template: str = DEFAULT_TEMPLATE) -> TextPrompt:
    """Embed the template words; an empty template yields a zero-token prompt."""
    tokens = backend.embed_words(tokenize(template))
    return TextPrompt(tokens=tokens.clone().requires_grad_(True), source_text=template)


@dataclass
class VisualPrompt:
    """Visual prompt in one of the five studied forms.

    Token origins carry ``delta`` (free offset leaf) and a tie source: the
    frozen initial text prompt (language-aware), random text-space vectors
    (generic-language), or random visual tokens (token-random, no translator
    involvement). Pixel origins carry a fixed region mask and a perturbation
    value leaf instead.
    """

    origin: str
    delta: torch.Tensor | None = None        # (n_p, d_v)
    tie_source: torch.Tensor | None = None   # (n_p, d_l) or (n_p, d_v) for token-random
    region_mask: torch.Tensor | None = None  # (H, W) float 0/1
    values: torch.Tensor | None = None       # (C_img, H, W) leaf

    @property
    def is_pixel(self) -> bool:
        return self.origin in PIXEL_ORIGINS

    def tokens(self, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Materialize prompt tokens; pass live or detached translator tensors."""
        if self.is_pixel:
            raise PromptKindError(f"{self.origin} prompt is pixel-space and has no tokens")
        if self.origin == "token-random":
            return self.tie_source + self.delta
        return translate_with(self.tie_source, w, b) + self.delta

    def trainable_leaves(self) -> list[torch.Tensor]:
        if self.is_pixel:
            return [self.values]
        return [self.delta]

    def uses_translator(self) -> bool:
        return self.origin in ("language-aware", "generic-language")


def patched_region_mask(h: int, w: int, side: int) -> torch.Tensor:
    """Square of learnable pixels at the top-left corner."""
    if side <= 0 or side > min(h, w):
        raise ConfigurationError(f"patched prompt side {side} exceeds image bounds {h}x{w}")
    mask = torch.zeros((h, w), dtype=torch.float64)
    mask[:side, :side] = 1.0
    return mask


def padded_region_mask(h: int, w: int, width: int) -> torch.Tensor:
    """Border frame of learnable pixels of the given width."""
    if width <= 0 or 2 * width > min(h, w):
        raise ConfigurationError(f"padded prompt width {width} exceeds image bounds {h}x{w}")
    mask = torch.ones((h, w), dtype=torch.float64)
    mask[width : h - width, width : w - width] = 0.0
    return mask


def make_visual_prompt(
    backend,
    theta: TokenNetParams,
    text_init: torch.Tensor,
    origin: str,
    seed: int,
    patched_side: int | None = None,
    padded_width: int | None = None,
) -> VisualPrompt:
    cfg = backend.config
    if origin not in VARIANTS:
        raise ConfigurationError(f"unknown prompt variant {origin!r}; choose from {VARIANTS}")
    n_p = text_init.shape[0]
    if origin in PIXEL_ORIGINS:
        if origin == "patched":
            mask = patched_region_mask(cfg.H, cfg.W, patched_side or max(1, cfg.H // 8))
        else:
            mask = padded_region_mask(cfg.H, cfg.W, padded_width or max(1, cfg.H // 16))
        values = torch.zeros((cfg.C_img, cfg.H, cfg.W), dtype=backend.dtype, requires_grad=True)
        return VisualPrompt(origin=origin, region_mask=mask.to(backend.dtype), values=values)
    gen = torch.Generator().manual_seed(seed)
    if origin == "language-aware":
        tie = text_init.detach().clone()
    elif origin == "generic-language":
        tie = torch.randn((n_p, cfg.d_l), generator=gen, dtype=torch.float64).to(backend.dtype)
    else:  # token-random
        tie = torch.randn((n_p, cfg.d_v), generator=gen, dtype=torch.float64).to(backend.dtype)
    delta = torch.zeros((n_p, cfg.d_v), dtype=backend.dtype, requires_grad=True)
    return VisualPrompt(origin=origin, delta=delta, tie_source=tie)


@dataclass
class PromptState:
    """All prompt state for one evaluation stream (one writer)."""

    text: TextPrompt
    text_init: torch.Tensor
    visual: VisualPrompt

    @property
    def variant(self) -> str:
        return self.visual.origin

    def visual_tokens(self, theta: TokenNetParams, live_theta: bool = False) -> torch.Tensor:
        w = theta.W if live_theta else theta.W.detach()
        b = theta.b if live_theta else theta.b.detach()
        return self.visual.tokens(w, b)


def init_prompt_state(
    backend,
    theta: TokenNetParams,
    template: str = DEFAULT_TEMPLATE,
    variant: str = "language-aware",
    seed: int = 0,
    patched_side: int | None = None,
    padded_width: int | None = None,
) -> PromptState:
    text = init_text_prompt(backend, template)
    text_init = text.tokens.detach().clone()
    visual = make_visual_prompt(
        backend, theta, text_init, variant, seed,
        patched_side=patched_side, padded_width=padded_width,
    )
    return PromptState(text=text, text_init=text_init, visual=visual)


def reset_prompts(state: PromptState, theta: TokenNetParams) -> PromptState:
    """Restore per-sample prompt state; the translator itself is untouched.

    The text prompt returns to its template embedding, the token offset to
    zero (so the visual prompt is again exactly the translator's output),
    and pixel perturbations to zero.
    """
    with torch.no_grad():
        state.text.tokens.copy_(state.text_init)
        if state.visual.is_pixel:
            state.visual.values.zero_()
        else:
            state.visual.delta.zero_()
    return state


def build_text_input(
    prompt: TextPrompt | torch.Tensor,
    class_index: int,
    vocab: ClassVocabulary,
    backend,
) -> torch.Tensor:
    """Assemble {SOS, P_t, class tokens, EOS} for one class."""
    tokens = prompt.tokens if isinstance(prompt, TextPrompt) else prompt
    if not 0 <= class_index < vocab.size:
        raise IndexError(f"class index {class_index} out of range for {vocab.size} classes")
    run = vocab.token_runs[class_index]
    if tokens.ndim != 2 or tokens.shape[1] != backend.config.d_l:
        raise ShapeMismatchError(f"expected (n_p, {backend.config.d_l}) prompt tokens, got {tuple(tokens.shape)}")
    seq = torch.cat([backend.sos_token.unsqueeze(0), tokens, run, backend.eos_token.unsqueeze(0)])
    if seq.shape[0] > TEXT_MAX_LEN:
        raise ShapeMismatchError(f"text input length {seq.shape[0]} exceeds {TEXT_MAX_LEN}")
    return seq


def build_visual_input(p_v, patches: PatchTokens) -> torch.Tensor:
    """Prepend prompt tokens before the cls and patch tokens.

    Accepts materialized (n_p, d_v) prompt tokens; a VisualPrompt object is
    rejected so pixel-space prompts cannot slip into the token pathway.
    """
    if isinstance(p_v, VisualPrompt):
        if p_v.is_pixel:
            raise PromptKindError(f"{p_v.origin} prompt is pixel-space; apply it to the image instead")
        raise PromptKindError("materialize token prompts (VisualPrompt.tokens) before building the input")
    if p_v.ndim != 2 or p_v.shape[1] != patches.patches.shape[1]:
        raise ShapeMismatchError(
            f"prompt width {tuple(p_v.shape)} does not match patch width {patches.patches.shape[1]}"
        )
    return torch.cat([p_v, patches.cls.unsqueeze(0), patches.patches])


def perturb_pixels(pixels: torch.Tensor, visual: VisualPrompt) -> torch.Tensor:
    """Apply a pixel-space prompt to a (B, C, H, W) batch, clamped to [0, 1]."""
    if not visual.is_pixel:
        raise PromptKindError(f"{visual.origin} prompt is not pixel-space")
    return torch.clamp(pixels + visual.values * visual.region_mask, 0.0, 1.0)


def apply_pixel_prompt(image: ImageSample, visual: VisualPrompt) -> ImageSample:
    """Pixel-prompted copy of an ImageSample (values detached)."""
    pixels = torch.from_numpy(image.pixels).to(visual.values.dtype).unsqueeze(0)
    out = perturb_pixels(pixels, visual)[0].detach().cpu().numpy()
    return ImageSample(pixels=out, id=image.id)
