"""Evaluation protocols: draft quality, per-level edit quality, ablations.

The editing evaluation mirrors the design loop: synthesize drafts from each
test spec's high-level tokens, then apply its low-level attributes one level
at a time, scoring every level on distributional distance (desk-FID against
held-out renders), prompt consistency, flip accuracy of the edited attribute,
stability of the other attribute heads, and non-target preservation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from . import tensor as T
from .dataset import LOW_ORDER, ATTRIBUTE_LEVELS, Corpus, canonical_skeleton
from .masks import RegionRules, mask_for
from .sampler import (
    EditRequest,
    SamplerConfig,
    edit_batch,
    synthesize_draft_batch,
)
from .schedule import NoiseSchedule
from .tensor import Tensor
from .trainer import DiffusionModel

EDIT_LEVELS = LOW_ORDER[:5]  # clothing_length .. hem; the L1..L5 chain


@dataclass(frozen=True)
class EditParams:
    rho: float = 0.5
    inner_steps: int = 1
    non_mask: bool = False


def eval_specs(corpus: Corpus, n: int, seed: int, split: str = "test"):
    """Seeded draw of non-pants test samples (they carry all five levels)."""
    items = [
        it for it in corpus.items(split) if it["category"] != "pants"
    ]
    if not items:
        raise ValueError(f"no non-pants items in split {split!r}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(items), size=n, replace=len(items) < n)
    return [corpus.load(items[int(i)]) for i in chosen]


def real_feature_bank(extractor, corpus: Corpus, seed: int, split: str = "test"):
    items = [it for it in corpus.items(split) if it["category"] != "pants"]
    images = np.stack([corpus.load(it).image for it in items])
    return M.extract_features(extractor, images)


def _matched_subsample(features: np.ndarray, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(features), size=n, replace=len(features) < n)
    return features[idx]


def draft_metrics(model: DiffusionModel, codec, s: NoiseSchedule, extractor,
                  corpus: Corpus, n: int, cfg: SamplerConfig, seed: int) -> dict:
    samples = eval_specs(corpus, n, seed)
    token_lists = [smp.spec.hierarchy().high for smp in samples]
    drafts = synthesize_draft_batch(
        token_lists, model, codec, s, cfg, seeds=[seed + 17 * i for i in range(n)]
    )
    real = real_feature_bank(extractor, corpus, seed)
    fake = M.extract_features(extractor, drafts)
    fid_val = M.fid(_matched_subsample(real, n, seed), fake)
    cov = M.coverage(real, fake, k=min(5, len(real) - 1))
    cons = float(
        np.mean(
            [
                M.attribute_consistency(drafts[i : i + 1], token_lists[i], extractor)
                for i in range(n)
            ]
        )
    )
    palette_acc = float(
        np.mean(
            [
                extractor.predict(drafts[i : i + 1])["palette"][0]
                == list(M.PALETTES).index(samples[i].spec.style)
                for i in range(n)
            ]
        )
    )
    return {
        "n": n,
        "desk_fid": fid_val,
        "consistency": cons,
        "coverage": cov,
        "palette_accuracy": palette_acc,
        "extractor_hash": extractor.content_hash(),
    }


def sequential_edit_eval(model: DiffusionModel, codec, s: NoiseSchedule, extractor,
                         corpus: Corpus, n: int, cfg: SamplerConfig,
                         params: EditParams, seed: int,
                         drafts: np.ndarray | None = None,
                         max_levels: int = len(EDIT_LEVELS)) -> dict:
    """Apply L1..L5 sequentially to n drafts, scoring each level."""
    samples = eval_specs(corpus, n, seed)
    kp = canonical_skeleton()
    if drafts is None:
        drafts = synthesize_draft_batch(
            [smp.spec.hierarchy().high for smp in samples], model, codec, s, cfg,
            seeds=[seed + 17 * i for i in range(n)],
        )
    real = real_feature_bank(extractor, corpus, seed)
    real_sub = _matched_subsample(real, n, seed)

    current = drafts
    preds_before = extractor.predict(current)
    levels_out = {}
    for li, attr in enumerate(EDIT_LEVELS[:max_levels]):
        targets = [smp.spec.attributes[attr] for smp in samples]
        requests = []
        for i, smp in enumerate(samples):
            rules = RegionRules(clothing_length=smp.spec.attributes["clothing_length"])
            requests.append(
                EditRequest(
                    draft=current[i],
                    attribute=attr,
                    level=targets[i],
                    mask=mask_for(attr, kp, rules),
                    rho=params.rho,
                    inner_steps=params.inner_steps,
                    keypoints=kp,
                    seed=seed + 1000 * (li + 1) + i,
                    non_mask=params.non_mask,
                )
            )
        hierarchies = [smp.spec.hierarchy() for smp in samples]
        edited = edit_batch(requests, model, codec, s, hierarchies, cfg)

        preds_after = extractor.predict(edited)
        target_idx = np.array([ATTRIBUTE_LEVELS[attr].index(v) for v in targets])
        flip_acc = float((preds_after[attr] == target_idx).mean())
        other = [a for a in EDIT_LEVELS if a != attr]
        other_changed = float(
            np.mean(
                [
                    (preds_after[a] != preds_before[a]).mean()
                    for a in other
                ]
            )
        )
        nte = float(
            np.mean(
                [
                    M.non_target_error(edited[i], current[i], requests[i].mask)
                    for i in range(n)
                ]
            )
        )
        fake = M.extract_features(extractor, edited)
        cons_tokens = [
            list(smp.spec.hierarchy().high)
            + [f"{a}:{smp.spec.attributes[a]}" for a in EDIT_LEVELS[: li + 1]]
            for smp in samples
        ]
        cons = float(
            np.mean(
                [
                    M.attribute_consistency(edited[i : i + 1], cons_tokens[i], extractor)
                    for i in range(n)
                ]
            )
        )
        levels_out[f"L{li + 1}"] = {
            "attribute": attr,
            "desk_fid": M.fid(real_sub, fake),
            "consistency": cons,
            "flip_accuracy": flip_acc,
            "other_heads_changed": other_changed,
            "non_target_l1": nte,
        }
        preds_before = preds_after
        current = edited
    return {
        "n": n,
        "levels": levels_out,
        "params": {"rho": params.rho, "inner_steps": params.inner_steps,
                   "non_mask": params.non_mask},
        "extractor_hash": extractor.content_hash(),
    }


def spearman(xs, ys) -> float:
    """Spearman rank correlation (no tie handling; inputs are metric curves)."""
    xr = np.argsort(np.argsort(xs)).astype(np.float64)
    yr = np.argsort(np.argsort(ys)).astype(np.float64)
    xc = xr - xr.mean()
    yc = yr - yr.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    return float((xc * yc).sum() / denom) if denom else 0.0


def measure_loop_alloc(model: DiffusionModel, codec, s: NoiseSchedule,
                       steps: int = 10, seed: int = 0) -> int:
    """Bytes wrapped into tensors by a short draft loop; the memory proxy."""
    cfg = SamplerConfig(steps=steps, cfg_scale=2.0, seed=seed, clip_x0=False)
    tokens = [("category:dress", "style:navy", "occasion:office")]
    T.reset_alloc_counter()
    synthesize_draft_batch(tokens, model, codec, s, cfg, seeds=[seed])
    return T.alloc_bytes()


def write_summary(path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
