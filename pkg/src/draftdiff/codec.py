"""Encoder/decoder pair around the diffusion space.

Identity mode diffuses raw pixels and makes the latent path trivially
cross-checkable. TinyAutoencoder mode compresses 64x64x3 images to a
16x16 latent grid with two stride-2 convolutions, trained separately on
plain L1 reconstruction and frozen before diffusion training. decode() is
differentiable end to end; preservation-loss gradients flow through it.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module
from .tensor import Tensor


class IdentityCodec:
    mode = "identity"
    latent_channels = 3
    downsample = 1

    def encode(self, image: Tensor) -> Tensor:
        return image

    def decode(self, latent: Tensor) -> Tensor:
        return latent

    def latent_shape(self, image_shape):
        return tuple(image_shape)

    def freeze(self):
        pass


class TinyAutoencoder(Module):
    mode = "tiny_ae"
    downsample = 4

    def __init__(self, latent_channels: int = 4, base: int = 24, *,
                 rng: np.random.Generator):
        self.latent_channels = latent_channels
        self.enc1 = Conv2d(3, base, 3, stride=2, padding=1, rng=rng)
        self.enc2 = Conv2d(base, base * 2, 3, stride=2, padding=1, rng=rng)
        self.enc_out = Conv2d(base * 2, latent_channels, 3, padding=1, rng=rng)
        self.dec_in = Conv2d(latent_channels, base * 2, 3, padding=1, rng=rng)
        self.dec1 = Conv2d(base * 2, base, 3, padding=1, rng=rng)
        self.dec2 = Conv2d(base, base, 3, padding=1, rng=rng)
        self.dec_out = Conv2d(base, 3, 3, padding=1, rng=rng)

    def encode(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"encode: expected (B,3,H,W), got {image.shape}")
        if image.shape[2] % 4 or image.shape[3] % 4:
            raise ValueError(f"encode: spatial dims {image.shape[2:]} not divisible by 4")
        h = T.silu(self.enc1(image))
        h = T.silu(self.enc2(h))
        return self.enc_out(h)

    def decode(self, latent: Tensor) -> Tensor:
        if latent.ndim != 4 or latent.shape[1] != self.latent_channels:
            raise ValueError(
                f"decode: expected (B,{self.latent_channels},h,w), got {latent.shape}"
            )
        h = T.silu(self.dec_in(latent))
        h = T.silu(self.dec1(T.upsample_nearest2x(h)))
        h = T.silu(self.dec2(T.upsample_nearest2x(h)))
        return self.dec_out(h)

    def latent_shape(self, image_shape):
        b, c, h, w = image_shape
        return (b, self.latent_channels, h // 4, w // 4)


def reconstruction_l1(codec, images: np.ndarray) -> float:
    """Mean per-pixel L1 round-trip error over a batch of (B,3,H,W) images."""
    with T.no_grad():
        x = Tensor(images)
        rec = codec.decode(codec.encode(x))
        return float(np.abs(rec.data - x.data).mean(dtype=np.float64))


def train_autoencoder(images: np.ndarray, *, epochs: int = 20, batch_size: int = 32,
                      lr: float = 2e-3, latent_channels: int = 4, seed: int = 0,
                      log=None) -> TinyAutoencoder:
    """Fit the tiny autoencoder with plain L1 reconstruction."""
    from .optim import AdamW

    rng = np.random.default_rng(seed)
    ae = TinyAutoencoder(latent_channels=latent_channels, rng=rng)
    opt = AdamW(ae.parameters(), lr=lr, weight_decay=0.0)
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - batch_size + 1, batch_size):
            batch = images[order[start : start + batch_size]]
            ae.zero_grad()
            x = Tensor(batch)
            rec = ae.decode(ae.encode(x))
            loss = T.mean_(T.abs_(T.sub(rec, x)))
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        if log is not None:
            log(epoch, float(np.mean(losses)))
    ae.freeze()
    return ae


def save_codec(path, codec) -> None:
    from . import checkpoint

    if codec.mode == "identity":
        checkpoint.save(path, {}, {"codec": {"mode": "identity"}})
    else:
        checkpoint.save(
            path,
            codec.state_dict(),
            {"codec": {"mode": "tiny_ae", "latent_channels": codec.latent_channels}},
        )


def load_codec(path):
    from . import checkpoint

    params, cfg = checkpoint.load(path)
    mode = cfg.get("codec", {}).get("mode")
    if mode == "identity":
        return IdentityCodec()
    if mode == "tiny_ae":
        ae = TinyAutoencoder(
            latent_channels=int(cfg["codec"]["latent_channels"]),
            rng=np.random.default_rng(0),
        )
        ae.load_state_dict(params)
        ae.freeze()
        return ae
    raise ValueError(f"unrecognized codec checkpoint config {cfg!r}")
