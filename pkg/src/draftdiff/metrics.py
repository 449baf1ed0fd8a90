"""Evaluation suite: distributional distance, prompt consistency, coverage.

Features come from a small multi-head attribute classifier trained on the
glyph corpus; its penultimate activations stand in for Inception/CLIP
features at desk scale. All metrics are deterministic given the frozen
extractor (identified by a content hash) and their inputs.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np
import scipy.linalg

from . import tensor as T
from .dataset import ATTRIBUTE_LEVELS, PALETTES, Corpus, GlyphSample
from .layers import Conv2d, Linear, Module
from .optim import AdamW
from .tensor import Tensor

HEAD_SPECS = tuple(
    [(a, len(ATTRIBUTE_LEVELS[a])) for a in ATTRIBUTE_LEVELS] + [("palette", len(PALETTES))]
)


class FeatureExtractor(Module):
    """Convolutional attribute classifier; features are the pooled activations."""

    def __init__(self, *, rng: np.random.Generator, width: int = 16):
        self.conv1 = Conv2d(3, width, 3, stride=2, padding=1, rng=rng)
        self.conv2 = Conv2d(width, width * 2, 3, stride=2, padding=1, rng=rng)
        self.conv3 = Conv2d(width * 2, width * 4, 3, stride=2, padding=1, rng=rng)
        self.feature_dim = width * 4
        self.heads = {}
        for name, n in HEAD_SPECS:
            head = Linear(self.feature_dim, n, rng=rng)
            setattr(self, f"head_{name}", head)
            self.heads[name] = head

    def features(self, images: Tensor) -> Tensor:
        """images: (B,3,H,W) in [0,1] -> (B, feature_dim)."""
        h = T.silu(self.conv1(images))
        h = T.silu(self.conv2(h))
        h = T.silu(self.conv3(h))
        return T.mean_(h, axis=(2, 3))

    def head_logits(self, feats: Tensor) -> dict[str, Tensor]:
        return {name: head(feats) for name, head in self.heads.items()}

    def predict(self, images: np.ndarray) -> dict[str, np.ndarray]:
        """images: (B,H,W,3) -> per-head argmax level indices."""
        with T.no_grad():
            feats = self.features(_to_chw(images))
            logits = self.head_logits(feats)
        return {name: l.data.argmax(axis=1) for name, l in logits.items()}

    def probabilities(self, images: np.ndarray) -> dict[str, np.ndarray]:
        with T.no_grad():
            feats = self.features(_to_chw(images))
            logits = self.head_logits(feats)
        out = {}
        for name, l in logits.items():
            z = l.data - l.data.max(axis=1, keepdims=True)
            e = np.exp(z)
            out[name] = e / e.sum(axis=1, keepdims=True)
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.state_dict()):
            h.update(name.encode())
            h.update(self.state_dict()[name].tobytes())
        return h.hexdigest()[:16]


def _to_chw(images: np.ndarray) -> Tensor:
    arr = np.asarray(images, np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _sample_labels(sample: GlyphSample) -> dict[str, int]:
    labels = {
        a: ATTRIBUTE_LEVELS[a].index(v) for a, v in sample.spec.attributes.items()
    }
    labels["palette"] = list(PALETTES).index(sample.spec.style)
    return labels


def train_extractor(corpus: Corpus, *, epochs: int = 8, batch_size: int = 32,
                    lr: float = 1.5e-3, seed: int = 0, quiet: bool = True) -> FeatureExtractor:
    """Fit the classifier on the train split; heads see only applicable samples."""
    rng = np.random.default_rng(seed)
    net = FeatureExtractor(rng=rng)
    opt = AdamW(net.parameters(), lr=lr, weight_decay=1e-4)
    items = corpus.items("train")
    for epoch in range(epochs):
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(items) - batch_size + 1, batch_size):
            batch = [corpus.load(items[i]) for i in order[start : start + batch_size]]
            images = np.stack([s.image for s in batch])
            labels = [_sample_labels(s) for s in batch]
            net.zero_grad()
            feats = net.features(_to_chw(images))
            logits = net.head_logits(feats)
            terms = []
            for name, lg in logits.items():
                idx = [i for i, lab in enumerate(labels) if name in lab]
                if not idx:
                    continue
                sub = T.gather_rows(lg, np.asarray(idx))
                y = np.array([labels[i][name] for i in idx])
                terms.append(T.softmax_cross_entropy(sub, y))
            loss = terms[0]
            for t_ in terms[1:]:
                loss = T.add(loss, t_)
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        if not quiet:
            print(f"extractor epoch {epoch}: loss {np.mean(losses):.4f}")
    net.freeze()
    return net


def head_accuracy(net: FeatureExtractor, samples: list[GlyphSample]) -> dict[str, float]:
    images = np.stack([s.image for s in samples])
    preds = net.predict(images)
    acc = {}
    for name, _ in HEAD_SPECS:
        pairs = [
            (preds[name][i], lab[name])
            for i, lab in enumerate(_sample_labels(s) for s in samples)
            if name in lab
        ]
        if pairs:
            acc[name] = float(np.mean([p == t for p, t in pairs]))
    return acc


def extract_features(net: FeatureExtractor, images: np.ndarray,
                     batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        with T.no_grad():
            out.append(net.features(_to_chw(images[start : start + batch_size])).data)
    return np.concatenate(out).astype(np.float64)


# -- metrics -------------------------------------------------------------------


def fid(real_features: np.ndarray, fake_features: np.ndarray,
        eps: float = 1e-6) -> float:
    return fid_report(real_features, fake_features, eps)["value"]


def fid_report(real_features: np.ndarray, fake_features: np.ndarray,
               eps: float = 1e-6) -> dict:
    """Frechet distance between feature Gaussians, with degeneracy flagging."""
    r = np.asarray(real_features, np.float64)
    f = np.asarray(fake_features, np.float64)
    if r.ndim != 2 or f.ndim != 2 or r.shape[1] != f.shape[1]:
        raise ValueError(f"fid: feature shapes {r.shape} vs {f.shape}")
    dim = r.shape[1]
    warning = None
    if min(len(r), len(f)) < 2 * dim:
        warning = f"fewer than {2 * dim} samples for {dim}-d features"
    mu_r, mu_f = r.mean(axis=0), f.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(r, rowvar=False))
    cov_f = np.atleast_2d(np.cov(f, rowvar=False))
    regularized = False
    prod, _ = scipy.linalg.sqrtm(cov_r @ cov_f, disp=False)
    if not np.isfinite(prod).all():
        cov_r = cov_r + eps * np.eye(dim)
        cov_f = cov_f + eps * np.eye(dim)
        prod, _ = scipy.linalg.sqrtm(cov_r @ cov_f, disp=False)
        regularized = True
    if np.iscomplexobj(prod):
        if np.abs(prod.imag).max() > 1e-6:
            cov_r = cov_r + eps * np.eye(dim)
            cov_f = cov_f + eps * np.eye(dim)
            prod, _ = scipy.linalg.sqrtm(cov_r @ cov_f, disp=False)
            regularized = True
        prod = prod.real
    value = float(
        np.sum((mu_r - mu_f) ** 2) + np.trace(cov_r) + np.trace(cov_f) - 2 * np.trace(prod)
    )
    return {"value": max(value, 0.0), "regularized": regularized, "warning": warning}


def sqrtm_eigh(mat: np.ndarray) -> np.ndarray:
    """Eigendecomposition square root for symmetric PSD matrices (test oracle
    counterpart lives in the suite; this is the library-facing helper)."""
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def attribute_consistency(images: np.ndarray, prompt_tokens,
                          extractor: FeatureExtractor) -> float:
    """Mean predicted probability of each prompted, classifiable level."""
    scoreable = []
    for token in prompt_tokens:
        if ":" not in token:
            continue
        cat, value = token.split(":", 1)
        if cat in ATTRIBUTE_LEVELS:
            scoreable.append((cat, ATTRIBUTE_LEVELS[cat].index(value)))
        elif cat == "style":
            scoreable.append(("palette", list(PALETTES).index(value)))
    if not scoreable:
        return 1.0
    probs = extractor.probabilities(np.asarray(images))
    vals = [probs[cat][:, idx].mean() for cat, idx in scoreable]
    return float(np.mean(vals))


def coverage(real_features: np.ndarray, fake_features: np.ndarray, k: int = 5) -> float:
    """Fraction of real samples whose k-NN ball contains a generated sample."""
    r = np.asarray(real_features, np.float64)
    f = np.asarray(fake_features, np.float64)
    n = len(r)
    if not (1 <= k < n):
        raise ValueError(f"coverage: need 1 <= k < n_real, got k={k}, n={n}")
    d_rr = np.sqrt(np.maximum(((r[:, None] - r[None]) ** 2).sum(-1), 0.0))
    np.fill_diagonal(d_rr, np.inf)
    radius = np.sort(d_rr, axis=1)[:, k - 1]
    d_rf = np.sqrt(np.maximum(((r[:, None] - f[None]) ** 2).sum(-1), 0.0))
    return float((d_rf.min(axis=1) <= radius).mean())


def non_target_error(edited: np.ndarray, draft: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute difference over the kept (mask == 0) region."""
    e = np.asarray(edited, np.float64)
    d = np.asarray(draft, np.float64)
    if e.shape != d.shape:
        raise ValueError(f"non_target_error: {e.shape} vs {d.shape}")
    m = np.asarray(mask) != 0
    keep = ~m
    if not keep.any():
        return 0.0
    diff = np.abs(e - d)
    if diff.ndim == 3 and m.ndim == 2:
        return float(diff[keep].mean())
    return float(diff[keep].mean())


def metric_report(metric: str, value: float, extractor: FeatureExtractor | None,
                  n_real: int, n_fake: int, config: dict | None = None) -> dict:
    return {
        "metric": metric,
        "value": value,
        "extractor_hash": extractor.content_hash() if extractor else None,
        "n_real": n_real,
        "n_fake": n_fake,
        "config": config or {},
    }


def save_extractor(path, net: FeatureExtractor) -> None:
    from . import checkpoint

    checkpoint.save(path, net.state_dict(), {"extractor": {"width": net.feature_dim // 4}})


def load_extractor(path) -> FeatureExtractor:
    from . import checkpoint

    params, cfg = checkpoint.load(path)
    net = FeatureExtractor(
        rng=np.random.default_rng(0), width=int(cfg["extractor"]["width"])
    )
    net.load_state_dict(params)
    net.freeze()
    return net
