"""Inference: coarse draft synthesis and masked, gradient-guided editing.

Drafts run a deterministic DDIM loop from Gaussian noise conditioned on the
high-level concept tokens only. Edits re-noise the encoded draft, condition
on the prompt prefix that includes the edited attribute, and keep the
non-target region faithful two ways: by compositing the forward-noised draft
outside the target mask (inner_steps = 0), or by steering the noise estimate
with the gradient of a preservation loss through the decoder (inner_steps
>= 1, which supersedes the composite for that step). The final step blends
against the un-noised draft, so masked-off regions survive exactly in pixel
space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import conditioning, schedule as sched, tensor as T
from .schedule import NoiseSchedule, ddim_step, eps_for_x0_clip, q_sample
from .tensor import Tensor
from .trainer import DiffusionModel
from .unet import cfg_predict


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 100
    cfg_scale: float = 7.5
    seed: int = 0
    space: str = "pixel"  # informational; the codec decides the actual space
    clip_x0: bool = True  # stabilize large guidance scales in pixel space
    heatmap_sigma: float = 2.0


@dataclass
class EditRequest:
    draft: np.ndarray  # (H, W, 3) in [0, 1]
    attribute: str     # attribute category, e.g. "clothing_length"
    level: str         # requested value, e.g. "long"
    mask: np.ndarray   # (H, W) binary target region m_a
    rho: float = 0.5
    inner_steps: int = 1
    keypoints: dict | None = None
    seed: int = 0
    non_mask: bool = False  # ablation: no blending, no guidance

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.rho}")
        if self.inner_steps < 0:
            raise ValueError(f"inner_steps must be >= 0, got {self.inner_steps}")
        m = np.asarray(self.mask)
        if m.shape != self.draft.shape[:2]:
            raise ValueError(f"mask {m.shape} does not match draft {self.draft.shape[:2]}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask must be binary")


def image_to_chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img, np.float32).transpose(2, 0, 1))[None]


def chw_to_image(x: np.ndarray) -> np.ndarray:
    return np.clip(x[0].transpose(1, 2, 0), 0.0, 1.0).astype(np.float32)


def mask_to_latent(mask: np.ndarray, codec, channels: int) -> np.ndarray:
    """Project an image-space target mask onto the diffusion grid.

    Any latent cell whose receptive patch touches the target becomes target."""
    m = (np.asarray(mask) != 0).astype(np.float32)
    f = getattr(codec, "downsample", 1)
    if f > 1:
        h, w = m.shape
        m = m.reshape(h // f, f, w // f, f).max(axis=(1, 3))
    return np.repeat(m[None, None], channels, axis=1)


def blend(model_sample: Tensor, noised_known: Tensor, mask) -> Tensor:
    """Target region from the model sample, the rest from the noised draft."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, np.float32)
    if model_sample.shape != noised_known.shape:
        raise ValueError(
            f"blend: shapes {model_sample.shape} vs {noised_known.shape} disagree"
        )
    if m.shape[-2:] != model_sample.shape[-2:]:
        raise ValueError(f"blend: mask {m.shape} vs sample {model_sample.shape}")
    out = m * model_sample.data + (1.0 - m) * noised_known.data
    return Tensor(out.astype(np.float32))


def preservation_loss(x_t: Tensor, x_h: np.ndarray, mask: np.ndarray, codec):
    """Negated L1 between the decoded state and the draft outside the target.

    Returns (loss value, gradient w.r.t. x_t); the gradient flows through
    decode() only. `x_h` is (H,W,3) or a batch (B,H,W,3); `mask` is (H,W)
    or (B,H,W) and applies per sample.
    """
    x_h = np.asarray(x_h, np.float32)
    if x_h.ndim == 3:
        x_h = x_h[None]
    xh = np.ascontiguousarray(x_h.transpose(0, 3, 1, 2))
    m = (np.asarray(mask) != 0).astype(np.float32)
    if m.ndim == 2:
        m = m[None]
    keep = np.repeat((1.0 - m)[:, None], xh.shape[1], axis=1)
    if xh.shape[0] == 1 and x_t.shape[0] > 1:
        xh = np.repeat(xh, x_t.shape[0], axis=0)
        keep = np.repeat(keep, x_t.shape[0], axis=0)
    if xh.shape[0] != x_t.shape[0]:
        raise ValueError(f"preservation_loss: {xh.shape[0]} drafts for {x_t.shape[0]} states")
    leaf = Tensor(x_t.data, requires_grad=True)
    with T.enable_grad():
        dec = codec.decode(leaf)
        resid = T.mul(T.sub(dec, Tensor(xh)), Tensor(keep))
        loss = T.scalar_mul(T.sum_(T.abs_(resid)), -1.0)
    T.backward(loss)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return loss.item(), grad


def _check_finite(x: np.ndarray, t: int, what: str) -> None:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite {what} at timestep {t}")


def _clip_bounds(codec):
    return (0.0, 1.0) if codec.mode == "identity" else None


def _prepare_cond(model: DiffusionModel, token_lists) -> Tensor:
    rows = [
        T.reshape(model.embed_tokens(tokens), (1, model.vocab.embedding_dim))
        for tokens in token_lists
    ]
    return Tensor(T.concat(rows, axis=0).data)


def synthesize_draft_batch(high_token_lists, model: DiffusionModel, codec,
                           s: NoiseSchedule, cfg: SamplerConfig, seeds) -> np.ndarray:
    """DDIM drafts from pure noise, high-level conditioning only, no pose."""
    if len(seeds) != len(high_token_lists):
        raise ValueError("need one seed per draft")
    b = len(seeds)
    lat_shape = codec.latent_shape((1, 3, 64, 64))[1:]
    with T.no_grad():
        null = Tensor(model.null_cond().data)
        cond = _prepare_cond(model, high_token_lists)
        x = np.stack(
            [
                np.random.default_rng(int(sd)).standard_normal(lat_shape).astype(np.float32)
                for sd in seeds
            ]
        )
        xt = Tensor(x)
        ts = s.ddim_timesteps(cfg.steps)
        bounds = _clip_bounds(codec) if cfg.clip_x0 else None
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps = cfg_predict(model.unet, xt, t, cond, null, None, cfg.cfg_scale)
            if bounds is not None:
                eps = eps_for_x0_clip(xt, t, s, bounds[0], bounds[1], eps)
            xt = ddim_step(xt, eps, t, t_prev, s)
            _check_finite(xt.data, t, "draft state")
        decoded = codec.decode(xt)
    return np.stack([chw_to_image(decoded.data[i : i + 1]) for i in range(b)])


def synthesize_draft(high_tokens, model: DiffusionModel, codec, s: NoiseSchedule,
                     cfg: SamplerConfig) -> np.ndarray:
    return synthesize_draft_batch([high_tokens], model, codec, s, cfg, [cfg.seed])[0]


def edit_tokens(hierarchy, attribute: str, level: str) -> tuple[str, ...]:
    """Prompt prefix for an edit: everything up to and including the edited
    attribute, with the requested value substituted in."""
    cats = [tok.split(":")[0] for tok in hierarchy.low]
    if attribute not in cats:
        raise KeyError(f"attribute {attribute!r} not in hierarchy {cats}")
    idx = cats.index(attribute)
    low = list(hierarchy.low[: idx + 1])
    low[idx] = f"{attribute}:{level}"
    return hierarchy.high + tuple(low)


def edit_batch(requests: list[EditRequest], model: DiffusionModel, codec,
               s: NoiseSchedule, hierarchies, cfg: SamplerConfig) -> np.ndarray:
    """Run Algorithm-style masked editing for a batch of requests."""
    b = len(requests)
    if len(hierarchies) != b:
        raise ValueError("need one hierarchy per request")
    token_lists = [
        edit_tokens(h, r.attribute, r.level) for h, r in zip(hierarchies, requests)
    ]
    drafts = np.concatenate([image_to_chw(r.draft) for r in requests])
    with T.no_grad():
        z0 = codec.encode(Tensor(drafts)).data
    lat_c = z0.shape[1]
    masks = np.concatenate([mask_to_latent(r.mask, codec, lat_c) for r in requests])
    img_masks = np.stack([(np.asarray(r.mask) != 0).astype(np.float32) for r in requests])

    pose = None
    if model.unet.pose_branch is not None and all(r.keypoints for r in requests):
        maps = [
            conditioning.pose_heatmaps(
                r.keypoints, r.draft.shape[:2], cfg.heatmap_sigma,
                getattr(codec, "downsample", 1),
            )
            for r in requests
        ]
        pose = Tensor(np.stack(maps))

    rngs = [np.random.default_rng(int(r.seed)) for r in requests]
    x = Tensor(np.stack([rng.standard_normal(z0.shape[1:]).astype(np.float32) for rng in rngs]))
    ts = s.ddim_timesteps(cfg.steps)
    bounds = _clip_bounds(codec) if cfg.clip_x0 else None
    u_steps = np.array([r.inner_steps for r in requests])
    rho = np.array([r.rho for r in requests], np.float32)[:, None, None, None]
    non_mask = np.array([r.non_mask for r in requests])
    if non_mask.any() and not non_mask.all():
        raise ValueError("mixed non_mask flags in one batch are not supported")
    if u_steps.min() != u_steps.max():
        raise ValueError("mixed inner_steps in one batch are not supported")
    u = int(u_steps[0])
    pure_resample = bool(non_mask[0])

    null = Tensor(model.null_cond().data)
    cond = _prepare_cond(model, token_lists)
    draft_images = np.stack([np.asarray(r.draft, np.float32) for r in requests])

    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        with T.no_grad():
            eps_hat = cfg_predict(model.unet, x, t, cond, null, pose, cfg.cfg_scale)
            if bounds is not None:
                eps_hat = eps_for_x0_clip(x, t, s, bounds[0], bounds[1], eps_hat)
        if pure_resample:
            with T.no_grad():
                x = ddim_step(x, eps_hat, t, t_prev, s)
        elif u == 0:
            with T.no_grad():
                model_sample = ddim_step(x, eps_hat, t, t_prev, s)
                if t_prev >= 1:
                    eps_known = Tensor(
                        np.stack(
                            [rng.standard_normal(z0.shape[1:]).astype(np.float32) for rng in rngs]
                        )
                    )
                    noised_known = q_sample(Tensor(z0), t_prev, eps_known, s)
                else:
                    noised_known = Tensor(z0)
                x = blend(model_sample, noised_known, masks)
        else:
            # guided recompute replaces the composite for this step; every
            # inner iteration evaluates the gradient at the same x_t, so
            # iterations beyond the first repeat the same update
            x_next = x
            for _ in range(u):
                _, g = preservation_loss(x, draft_images, img_masks, codec)
                eps_guided = Tensor(eps_hat.data - rho * g)
                with T.no_grad():
                    x_next = ddim_step(x, eps_guided, t, t_prev, s)
            x = x_next
        _check_finite(x.data, t, "edit state")
    with T.no_grad():
        decoded = codec.decode(x)
    return np.stack([chw_to_image(decoded.data[i : i + 1]) for i in range(b)])


def edit(request: EditRequest, model: DiffusionModel, codec, s: NoiseSchedule,
         hierarchy, cfg: SamplerConfig) -> np.ndarray:
    return edit_batch([request], model, codec, s, [hierarchy], cfg)[0]
