"""Language-to-vision token translator.

A single affine map turns text prompt tokens (width d_l) into visual prompt
tokens (width d_v), row by row. Its parameters are the only state besides
the prompts that adaptation ever updates, and unlike the prompts they
persist across the whole evaluation stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import digest_tensors
from .errors import ConfigurationError, ShapeMismatchError


@dataclass
class TokenNetParams:
    W: torch.Tensor  # (d_v, d_l)
    b: torch.Tensor  # (d_v,)
    seed: int

    @property
    def d_v(self) -> int:
        return self.W.shape[0]

    @property
    def d_l(self) -> int:
        return self.W.shape[1]

    def digest(self) -> str:
        return digest_tensors({"W": self.W, "b": self.b})

    def clone(self) -> "TokenNetParams":
        return TokenNetParams(W=self.W.detach().clone(), b=self.b.detach().clone(), seed=self.seed)


def init_token_net(d_l: int, d_v: int, seed: int, dtype: torch.dtype = torch.float64) -> TokenNetParams:
    """Zero-mean random weight with scale 1/sqrt(d_l), zero bias."""
    if d_l <= 0 or d_v <= 0:
        raise ConfigurationError(f"token net dims must be positive, got d_l={d_l}, d_v={d_v}")
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn((d_v, d_l), generator=gen, dtype=torch.float64) * d_l**-0.5
    return TokenNetParams(W=w.to(dtype), b=torch.zeros(d_v, dtype=dtype), seed=seed)


def translate(p_t: torch.Tensor, theta: TokenNetParams) -> torch.Tensor:
    """Map (n_p, d_l) text prompt tokens to (n_p, d_v) visual prompt tokens."""
    if p_t.ndim != 2 or p_t.shape[1] != theta.d_l:
        raise ShapeMismatchError(f"expected (n_p, {theta.d_l}) text tokens, got {tuple(p_t.shape)}")
    return p_t @ theta.W.T + theta.b


def translate_with(p_t: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Same affine map on explicit tensors (used when W, b are live graph leaves)."""
    if p_t.ndim != 2 or p_t.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"expected (n_p, {w.shape[1]}) text tokens, got {tuple(p_t.shape)}")
    return p_t @ w.T + b


def save_token_net(theta: TokenNetParams, path: str | Path) -> None:
    """Textual tensor file: 2-line header (dims, seed), then W rows, then b."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{theta.d_v} {theta.d_l}\n")
        fh.write(f"{theta.seed}\n")
        for row in theta.W.detach().cpu().numpy():
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
        fh.write(" ".join(repr(float(x)) for x in theta.b.detach().cpu().numpy()) + "\n")


def load_token_net(path: str | Path, dtype: torch.dtype = torch.float64) -> TokenNetParams:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise ConfigurationError(f"token net file {path}: missing header")
    try:
        d_v, d_l = (int(x) for x in lines[0].split())
        seed = int(lines[1])
    except ValueError as exc:
        raise ConfigurationError(f"token net file {path}: bad header: {exc}") from exc
    body = lines[2:]
    if len(body) != d_v + 1:
        raise ConfigurationError(f"token net file {path}: expected {d_v + 1} tensor rows, got {len(body)}")
    w = np.array([[float(x) for x in row.split()] for row in body[:d_v]], dtype=np.float64)
    b = np.array([float(x) for x in body[d_v].split()], dtype=np.float64)
    if w.shape != (d_v, d_l) or b.shape != (d_v,):
        raise ConfigurationError(f"token net file {path}: tensor shapes do not match header")
    return TokenNetParams(W=torch.from_numpy(w).to(dtype), b=torch.from_numpy(b).to(dtype), seed=seed)
