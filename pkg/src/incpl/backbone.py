"""Frozen dual-encoder backend.

The toy backend is a pair of small pre-norm transformers (vision and text
branch) with seeded random frozen weights and a linear projection of both
branches into a shared joint space of width ``d_v``. Weights never change
after construction; the only differentiable inputs are prompt tokens (and,
for pixel-space prompts, the image perturbation). An adapter class exposes
the same surface for externally supplied encoders.

All parameters live in a flat name -> tensor dict so the weight digest is a
canonical hash over the full frozen state.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericalFailureError, ShapeMismatchError

# Text positional table size; sequences beyond this are rejected.
TEXT_MAX_LEN = 64

_PRECISIONS = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class BackendConfig:
    """Architecture hyper-parameters of the frozen toy encoder."""

    d_v: int = 16
    d_l: int = 16
    M: int = 16
    C_img: int = 3
    H: int = 32
    W: int = 32
    n_layers: int = 2
    temperature: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.d_v <= 0 or self.d_l <= 0:
            raise ConfigurationError(f"embedding widths must be positive, got d_v={self.d_v}, d_l={self.d_l}")
        if self.M < 1:
            raise ConfigurationError(f"patch count M must be >= 1, got {self.M}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        g = math.isqrt(self.M)
        if g * g != self.M:
            raise ConfigurationError(f"M={self.M} is not a square patch grid")
        if self.H % g or self.W % g:
            raise ConfigurationError(f"image {self.H}x{self.W} not divisible into a {g}x{g} patch grid")
        if self.n_layers < 1:
            raise ConfigurationError(f"n_layers must be >= 1, got {self.n_layers}")

    @property
    def grid(self) -> int:
        return math.isqrt(self.M)

    @property
    def patch_shape(self) -> tuple[int, int]:
        return self.H // self.grid, self.W // self.grid

    def to_text(self) -> str:
        """Render as the plain-text key/value config document."""
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BackendConfig":
        known = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"backend config line {lineno}: expected 'key = value', got {raw!r}")
            key, _, val = (p.strip() for p in line.partition("="))
            if key not in known:
                raise ConfigurationError(f"backend config line {lineno}: unknown key {key!r}")
            values[key] = float(val) if key == "temperature" else int(val)
        return cls(**values)


@dataclass(frozen=True)
class ImageSample:
    """One input image: C_img x H x W float array with values in [0, 1]."""

    pixels: np.ndarray
    id: str

    def validate(self, config: BackendConfig) -> None:
        expected = (config.C_img, config.H, config.W)
        if tuple(self.pixels.shape) != expected:
            raise ShapeMismatchError(
                f"image {self.id!r}: expected shape {expected}, got {tuple(self.pixels.shape)}"
            )
        if not np.isfinite(self.pixels).all():
            raise NumericalFailureError("non-finite pixel values", sample_id=self.id)


@dataclass(frozen=True)
class PatchTokens:
    """Frozen patch projection output: one cls token plus M patch tokens."""

    cls: torch.Tensor      # (d_v,)
    patches: torch.Tensor  # (M, d_v)


@dataclass(frozen=True)
class Embedding:
    """A joint-space embedding vector."""

    vec: torch.Tensor

    @property
    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.vec))


def _heads_for(width: int) -> int:
    for h in (4, 2, 1):
        if width % h == 0:
            return h
    return 1


def _block_param_specs(width: int) -> list[tuple[str, tuple[int, ...], str]]:
    # (suffix, shape, init kind)
    return [
        ("ln1.w", (width,), "ones"),
        ("ln1.b", (width,), "zeros"),
        ("attn.wq", (width, width), "proj"),
        ("attn.bq", (width,), "zeros"),
        ("attn.wk", (width, width), "proj"),
        ("attn.bk", (width,), "zeros"),
        ("attn.wv", (width, width), "proj"),
        ("attn.bv", (width,), "zeros"),
        ("attn.wo", (width, width), "proj"),
        ("attn.bo", (width,), "zeros"),
        ("ln2.w", (width,), "ones"),
        ("ln2.b", (width,), "zeros"),
        ("mlp.w1", (4 * width, width), "proj"),
        ("mlp.b1", (4 * width,), "zeros"),
        ("mlp.w2", (width, 4 * width), "proj"),
        ("mlp.b2", (width,), "zeros"),
    ]


class ToyBackend:
    """Seeded random frozen dual encoder at desk scale.

    ``precision`` selects the compute/storage dtype: ``float64`` is the
    verification mode used by the gradient checks; ``float32`` trades
    accuracy for throughput. Weights are generated in float64 and cast, so
    the two precisions describe the same underlying model.
    """

    def __init__(self, config: BackendConfig, precision: str = "float64"):
        if precision not in _PRECISIONS:
            raise ConfigurationError(f"precision must be one of {sorted(_PRECISIONS)}, got {precision!r}")
        self.config = config
        self.precision = precision
        self.dtype = _PRECISIONS[precision]
        self._weights = self._build_weights()
        self._digest = _digest_tensors(self._weights)

    # -- construction -----------------------------------------------------

    def _build_weights(self) -> dict[str, torch.Tensor]:
        cfg = self.config
        gen = torch.Generator().manual_seed(cfg.seed)
        w: dict[str, torch.Tensor] = {}

        def make(name: str, shape: tuple[int, ...], kind: str) -> None:
            if kind == "ones":
                t = torch.ones(shape, dtype=torch.float64)
            elif kind == "zeros":
                t = torch.zeros(shape, dtype=torch.float64)
            else:
                t = torch.randn(shape, generator=gen, dtype=torch.float64)
                if kind == "proj":
                    t *= shape[-1] ** -0.5
                elif kind == "pos":
                    t *= 0.3
                elif kind == "bias":
                    t *= 0.1
            w[name] = t

        ph, pw = cfg.patch_shape
        patch_dim = cfg.C_img * ph * pw
        make("vis.patch.w", (cfg.d_v, patch_dim), "proj")
        make("vis.patch.b", (cfg.d_v,), "bias")
        make("vis.cls", (cfg.d_v,), "unit")
        make("vis.pos", (1 + cfg.M, cfg.d_v), "pos")
        for i in range(cfg.n_layers):
            for suffix, shape, kind in _block_param_specs(cfg.d_v):
                make(f"vis.blk{i}.{suffix}", shape, kind)
        make("vis.ln_post.w", (cfg.d_v,), "ones")
        make("vis.ln_post.b", (cfg.d_v,), "zeros")
        make("vis.proj", (cfg.d_v, cfg.d_v), "proj")

        make("txt.sos", (cfg.d_l,), "unit")
        make("txt.eos", (cfg.d_l,), "unit")
        make("txt.pos", (TEXT_MAX_LEN, cfg.d_l), "pos")
        for i in range(cfg.n_layers):
            for suffix, shape, kind in _block_param_specs(cfg.d_l):
                make(f"txt.blk{i}.{suffix}", shape, kind)
        make("txt.ln_final.w", (cfg.d_l,), "ones")
        make("txt.ln_final.b", (cfg.d_l,), "zeros")
        make("txt.proj", (cfg.d_v, cfg.d_l), "proj")

        return {k: v.to(self.dtype) for k, v in w.items()}

    # -- frozen-state inspection -------------------------------------------

    def weight_digest(self) -> str:
        """Canonical sha256 over all frozen parameters, lowercase hex."""
        return _digest_tensors(self._weights)

    @property
    def sos_token(self) -> torch.Tensor:
        return self._weights["txt.sos"]

    @property
    def eos_token(self) -> torch.Tensor:
        return self._weights["txt.eos"]

    # -- word embeddings ----------------------------------------------------

    def embed_words(self, words: Sequence[str]) -> torch.Tensor:
        """Frozen embedding of whitespace-tokenized words, one row per word.

        Each vector is a pure function of (backend seed, word), so the
        table is unbounded but fully deterministic.
        """
        rows = []
        for word in words:
            h = hashlib.sha256(f"{self.config.seed}|{word}".encode("utf-8")).digest()
            word_seed = int.from_bytes(h[:8], "big") & 0x7FFFFFFFFFFFFFFF
            gen = torch.Generator().manual_seed(word_seed)
            rows.append(torch.randn(self.config.d_l, generator=gen, dtype=torch.float64))
        if not rows:
            return torch.zeros((0, self.config.d_l), dtype=self.dtype)
        return torch.stack(rows).to(self.dtype)

    # -- vision branch ------------------------------------------------------

    def patchify_batch(self, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Project a (B, C, H, W) pixel batch into (cls (B,1,d_v), patches (B,M,d_v)).

        Differentiable with respect to ``pixels`` (needed by pixel-space prompts).
        """
        cfg = self.config
        if pixels.ndim != 4 or tuple(pixels.shape[1:]) != (cfg.C_img, cfg.H, cfg.W):
            raise ShapeMismatchError(
                f"expected pixel batch (B, {cfg.C_img}, {cfg.H}, {cfg.W}), got {tuple(pixels.shape)}"
            )
        ph, pw = cfg.patch_shape
        b = pixels.shape[0]
        # (B, C, gh, gw, ph, pw) -> (B, gh*gw, C*ph*pw), row-major over the grid
        tiles = pixels.unfold(2, ph, ph).unfold(3, pw, pw)
        tiles = tiles.permute(0, 2, 3, 1, 4, 5).reshape(b, cfg.M, cfg.C_img * ph * pw)
        patches = tiles.to(self.dtype) @ self._weights["vis.patch.w"].T + self._weights["vis.patch.b"]
        cls = self._weights["vis.cls"].expand(b, 1, cfg.d_v)
        return cls, patches

    def patchify(self, image: ImageSample) -> PatchTokens:
        image.validate(self.config)
        pixels = torch.from_numpy(np.ascontiguousarray(image.pixels)).to(self.dtype).unsqueeze(0)
        cls, patches = self.patchify_batch(pixels)
        return PatchTokens(cls=cls[0, 0], patches=patches[0])

    def encode_image_batch(self, tokens: torch.Tensor) -> torch.Tensor:
        """Encode (B, L, d_v) token sequences into (B, d_v) joint embeddings.

        L must equal n_prompt + 1 + M; positional encodings attach to the
        trailing cls+patch block, prompt tokens enter position-free.
        """
        cfg = self.config
        if tokens.ndim != 3 or tokens.shape[-1] != cfg.d_v:
            raise ShapeMismatchError(f"expected (B, L, {cfg.d_v}) image tokens, got {tuple(tokens.shape)}")
        n_prompt = tokens.shape[1] - 1 - cfg.M
        if n_prompt < 0:
            raise ShapeMismatchError(
                f"sequence length {tokens.shape[1]} shorter than 1 + M = {1 + cfg.M}"
            )
        core = tokens[:, n_prompt:] + self._weights["vis.pos"]
        x = torch.cat([tokens[:, :n_prompt], core], dim=1) if n_prompt else core
        x = self._transformer(x, "vis")
        h = F.layer_norm(
            x[:, n_prompt], (cfg.d_v,), self._weights["vis.ln_post.w"], self._weights["vis.ln_post.b"]
        )
        return h @ self._weights["vis.proj"].T

    def encode_image(self, tokens: torch.Tensor) -> Embedding:
        return Embedding(vec=self.encode_image_batch(tokens.unsqueeze(0))[0])

    # -- text branch ----------------------------------------------------------

    def encode_text_batch(self, sequences: Sequence[torch.Tensor]) -> torch.Tensor:
        """Encode variable-length (T_i, d_l) token sequences into (n, d_v).

        The readout position is each sequence's final (EOS) token.
        """
        cfg = self.config
        if len(sequences) == 0:
            raise ShapeMismatchError("encode_text_batch requires at least one sequence")
        lengths = []
        for seq in sequences:
            if seq.ndim != 2 or seq.shape[1] != cfg.d_l:
                raise ShapeMismatchError(f"expected (T, {cfg.d_l}) text tokens, got {tuple(seq.shape)}")
            if seq.shape[0] < 3:
                raise ShapeMismatchError(
                    f"text sequence of length {seq.shape[0]} too short: class token run is empty"
                )
            if seq.shape[0] > TEXT_MAX_LEN:
                raise ShapeMismatchError(f"text sequence length {seq.shape[0]} exceeds {TEXT_MAX_LEN}")
            lengths.append(seq.shape[0])
        t_max = max(lengths)
        rows = [F.pad(seq, (0, 0, 0, t_max - seq.shape[0])) for seq in sequences]
        x = torch.stack(rows).to(self.dtype) + self._weights["txt.pos"][:t_max]
        pad = torch.zeros((len(sequences), t_max), dtype=torch.bool)
        for i, n in enumerate(lengths):
            pad[i, n:] = True
        x = self._transformer(x, "txt", key_pad=pad)
        idx = torch.tensor([n - 1 for n in lengths])
        h = F.layer_norm(
            x[torch.arange(len(sequences)), idx],
            (cfg.d_l,),
            self._weights["txt.ln_final.w"],
            self._weights["txt.ln_final.b"],
        )
        return h @ self._weights["txt.proj"].T

    def encode_text(self, sequence: torch.Tensor) -> Embedding:
        return Embedding(vec=self.encode_text_batch([sequence])[0])

    # -- shared transformer core ----------------------------------------------

    def _transformer(self, x: torch.Tensor, branch: str, key_pad: torch.Tensor | None = None) -> torch.Tensor:
        w = self._weights
        width = x.shape[-1]
        n_heads = _heads_for(width)
        head_dim = width // n_heads
        b, length, _ = x.shape
        for i in range(self.config.n_layers):
            p = f"{branch}.blk{i}"
            h = F.layer_norm(x, (width,), w[f"{p}.ln1.w"], w[f"{p}.ln1.b"])
            q = (h @ w[f"{p}.attn.wq"].T + w[f"{p}.attn.bq"]).view(b, length, n_heads, head_dim).transpose(1, 2)
            k = (h @ w[f"{p}.attn.wk"].T + w[f"{p}.attn.bk"]).view(b, length, n_heads, head_dim).transpose(1, 2)
            v = (h @ w[f"{p}.attn.wv"].T + w[f"{p}.attn.bv"]).view(b, length, n_heads, head_dim).transpose(1, 2)
            scores = q @ k.transpose(-1, -2) / math.sqrt(head_dim)
            if key_pad is not None:
                scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
            att = torch.softmax(scores, dim=-1) @ v
            att = att.transpose(1, 2).reshape(b, length, width)
            x = x + att @ w[f"{p}.attn.wo"].T + w[f"{p}.attn.bo"]
            h = F.layer_norm(x, (width,), w[f"{p}.ln2.w"], w[f"{p}.ln2.b"])
            h = F.gelu(h @ w[f"{p}.mlp.w1"].T + w[f"{p}.mlp.b1"])
            x = x + h @ w[f"{p}.mlp.w2"].T + w[f"{p}.mlp.b2"]
        return x


class AdapterBackend:
    """Real-backbone adapter: plug in externally produced encoders.

    The callables must accept and return torch tensors and participate in
    autograd with respect to prompt inputs, matching ToyBackend's surface.
    Used for full-scale runs with a pretrained dual encoder; nothing in the
    adaptation loop depends on which backend class it is handed.
    """

    def __init__(
        self,
        config: BackendConfig,
        *,
        patchify_batch: Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]],
        encode_image_batch: Callable[[torch.Tensor], torch.Tensor],
        encode_text_batch: Callable[[Sequence[torch.Tensor]], torch.Tensor],
        embed_words: Callable[[Sequence[str]], torch.Tensor],
        sos_token: torch.Tensor,
        eos_token: torch.Tensor,
        weight_digest: str,
        dtype: torch.dtype = torch.float64,
    ):
        self.config = config
        self.dtype = dtype
        self._patchify_batch = patchify_batch
        self._encode_image_batch = encode_image_batch
        self._encode_text_batch = encode_text_batch
        self._embed_words = embed_words
        self.sos_token = sos_token
        self.eos_token = eos_token
        self._digest = weight_digest

    def weight_digest(self) -> str:
        return self._digest

    def patchify_batch(self, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._patchify_batch(pixels)

    def patchify(self, image: ImageSample) -> PatchTokens:
        image.validate(self.config)
        pixels = torch.from_numpy(np.ascontiguousarray(image.pixels)).to(self.dtype).unsqueeze(0)
        cls, patches = self.patchify_batch(pixels)
        return PatchTokens(cls=cls[0, 0], patches=patches[0])

    def encode_image_batch(self, tokens: torch.Tensor) -> torch.Tensor:
        return self._encode_image_batch(tokens)

    def encode_image(self, tokens: torch.Tensor) -> Embedding:
        return Embedding(vec=self.encode_image_batch(tokens.unsqueeze(0))[0])

    def encode_text_batch(self, sequences: Sequence[torch.Tensor]) -> torch.Tensor:
        return self._encode_text_batch(sequences)

    def encode_text(self, sequence: torch.Tensor) -> Embedding:
        return Embedding(vec=self.encode_text_batch([sequence])[0])

    def embed_words(self, words: Sequence[str]) -> torch.Tensor:
        return self._embed_words(words)


def adapter_from_toy(toy: ToyBackend) -> AdapterBackend:
    """Wrap a ToyBackend behind the adapter surface (parity testing helper)."""
    return AdapterBackend(
        toy.config,
        patchify_batch=toy.patchify_batch,
        encode_image_batch=toy.encode_image_batch,
        encode_text_batch=toy.encode_text_batch,
        embed_words=toy.embed_words,
        sos_token=toy.sos_token,
        eos_token=toy.eos_token,
        weight_digest=toy.weight_digest(),
        dtype=toy.dtype,
    )


def loss_gradient(
    loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    sample_id: str | None = None,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Exact analytic gradients of a scalar loss with respect to prompt inputs.

    ``loss_fn`` rebuilds the loss from the given leaves; frozen encoder
    weights never receive gradients because they are plain constants in the
    graph. Parameters that do not influence the loss get zero gradients.
    """
    leaves = {name: p.detach().clone().requires_grad_(True) for name, p in params.items()}
    value = loss_fn(leaves)
    if value.ndim != 0:
        raise ShapeMismatchError(f"loss must be scalar, got shape {tuple(value.shape)}")
    if not torch.isfinite(value):
        raise NumericalFailureError(f"non-finite loss {float(value.detach())!r}", sample_id=sample_id)
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    out = {
        name: (g.detach() if g is not None else torch.zeros_like(leaf))
        for (name, leaf), g in zip(leaves.items(), grads)
    }
    return float(value.detach()), out


def _digest_tensors(tensors: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("utf-8"))
        h.update(t.cpu().numpy().tobytes())
    return h.hexdigest()


def digest_tensors(tensors: Mapping[str, torch.Tensor]) -> str:
    """Public canonical tensor digest (used for token-net chain checks)."""
    return _digest_tensors(tensors)
