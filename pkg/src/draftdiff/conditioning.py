"""Prompt embeddings, pose heatmaps, and classifier-free conditioning dropout.

The vocabulary is closed: every prompt token is `category:value`. Prompts are
encoded as the mean of learned per-token embedding rows; index 0 is a reserved
null token standing for "unconditional".
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NULL_TOKEN = "<null>"


@dataclass(frozen=True)
class TokenVocabulary:
    tokens: tuple[str, ...]
    embedding_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens or self.tokens[0] != NULL_TOKEN:
            raise ValueError(f"vocabulary must reserve {NULL_TOKEN!r} at index 0")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"unknown token {token!r}") from None

    def indices(self, tokens) -> list[int]:
        unknown = [t for t in tokens if t not in self.tokens]
        if unknown:
            raise KeyError(f"unknown tokens: {unknown}")
        return [self.tokens.index(t) for t in tokens]

    def to_json(self) -> str:
        return json.dumps(
            {"tokens": list(self.tokens), "embedding_dim": self.embedding_dim}, indent=2
        )

    @classmethod
    def from_json(cls, text: str) -> "TokenVocabulary":
        d = json.loads(text)
        return cls(tokens=tuple(d["tokens"]), embedding_dim=int(d["embedding_dim"]))


def embed_prompt(tokens, vocab: TokenVocabulary, table: Tensor) -> Tensor:
    """Mean of the tokens' embedding rows; the empty prompt is the null row."""
    if table.shape != (len(vocab), vocab.embedding_dim):
        raise ValueError(
            f"embedding table {table.shape} != ({len(vocab)}, {vocab.embedding_dim})"
        )
    idx = vocab.indices(tokens) if tokens else [0]
    rows = T.gather_rows(table, np.asarray(idx, dtype=np.int64))
    return T.mean_(rows, axis=0)


def null_embedding(vocab: TokenVocabulary, table: Tensor) -> Tensor:
    return embed_prompt([], vocab, table)


def render_heatmaps(keypoints, H: int, W: int, sigma: float = 2.0) -> Tensor:
    """One Gaussian bump per keypoint, centered on the rounded pixel location.

    keypoints: iterable of (name, x, y) with x along columns, y along rows.
    """
    if H < 1 or W < 1:
        raise ValueError(f"bad heatmap size {H}x{W}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    kps = list(keypoints)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    maps = np.empty((len(kps), H, W), dtype=np.float32)
    for k, (name, x, y) in enumerate(kps):
        cx, cy = round(float(x)), round(float(y))
        if not (0 <= cx < W and 0 <= cy < H):
            raise ValueError(f"keypoint {name!r} at ({x}, {y}) outside {W}x{H} image")
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        maps[k] = np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)
    return Tensor(maps)


def pose_heatmaps(keypoints: dict, image_hw: tuple[int, int], sigma: float = 2.0,
                  downsample: int = 1) -> np.ndarray:
    """Keypoint heatmaps on the diffusion grid.

    With a compressing codec the grid is smaller than the image; coordinates
    and spread scale down with it (spread floors at 0.75 px so single-cell
    peaks stay useful).
    """
    h, w = image_hw
    if h % downsample or w % downsample:
        raise ValueError(f"image {h}x{w} not divisible by downsample {downsample}")
    pts = [
        (name, x / downsample, y / downsample) for name, (x, y) in keypoints.items()
    ]
    # clamp rounded centers into the smaller grid
    gh, gw = h // downsample, w // downsample
    pts = [
        (n, min(max(x, 0.0), gw - 1), min(max(y, 0.0), gh - 1)) for n, x, y in pts
    ]
    sig = max(sigma / downsample, 0.75)
    return render_heatmaps(pts, gh, gw, sig).data


def cfg_dropout(cond: Tensor, null_cond: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """With probability p, replace the conditioning vector by the null one."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout probability {p} not in [0, 1)")
    if p > 0.0 and rng.random() < p:
        return null_cond
    return cond
