"""Operator entry points for every pipeline stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import codec as codec_mod
from . import dataset as data_mod
from . import evaluation as ev
from . import imageio, metrics as M, rle, schedule as sched
from .config import RunConfig, load_config
from .dataset import Corpus, canonical_skeleton
from .masks import RegionRules, apply_manual_edit, mask_for
from .sampler import EditRequest, SamplerConfig, edit as run_edit, synthesize_draft
from .trainer import DiffusionModel, TrainConfig, fit
from .unet import UNetConfig


def _digest(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _emit(summary: dict, out_path: Path | None) -> None:
    text = json.dumps(summary, indent=2, sort_keys=True)
    click.echo(text)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text)


def _load_run_config(config_path) -> RunConfig:
    try:
        return load_config(config_path)
    except (ValueError, OSError) as e:
        raise click.ClickException(str(e))


def _corpus(data_dir) -> Corpus:
    manifest = Path(data_dir) / "manifest.json"
    if not manifest.exists():
        raise click.ClickException(f"no manifest at {manifest}; run gen-data first")
    return Corpus(manifest)


def _load_codec(path):
    if not path:
        return codec_mod.IdentityCodec()
    return codec_mod.load_codec(path)


def _schedule_from(cfg: RunConfig):
    return sched.build_linear(cfg.train.timesteps, cfg.train.beta_start, cfg.train.beta_end)


def _extractor_for(cfg: RunConfig, corpus: Corpus, out_dir: Path):
    path = Path(cfg.paths.extractor) if cfg.paths.extractor else out_dir / "extractor.ckpt"
    if path.exists():
        return M.load_extractor(path), path
    net = train_extractor_with_log(cfg, corpus)
    path.parent.mkdir(parents=True, exist_ok=True)
    M.save_extractor(path, net)
    return net, path


def train_extractor_with_log(cfg: RunConfig, corpus: Corpus):
    click.echo("training attribute classifier for metrics ...", err=True)
    return M.train_extractor(
        corpus, epochs=cfg.eval.extractor_epochs, seed=cfg.eval.seed, quiet=False
    )


@click.group()
def main():
    """Hierarchical garment-draft diffusion: data, training, sampling, serving."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--n-per-category", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def gen_data(config_path, seed, n_per_category, out_dir):
    """Render the procedural glyph corpus with sidecars and a manifest."""
    cfg = _load_run_config(config_path)
    seed = cfg.data.seed if seed is None else seed
    n = cfg.data.n_per_category if n_per_category is None else n_per_category
    out = Path(out_dir or cfg.data.dir)
    t0 = time.time()
    manifest = data_mod.generate_corpus(n, seed=seed, out_dir=out)
    _emit(
        {
            "command": "gen-data",
            "out_dir": str(out),
            "seed": seed,
            "n_per_category": n,
            "n_items": len(manifest["items"]),
            "manifest_hash": manifest["content_hash"],
            "elapsed_s": round(time.time() - t0, 2),
        },
        out / "gen_data_summary.json",
    )


@main.command("train-codec")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--epochs", type=int, default=20)
@click.option("--seed", type=int, default=0)
def train_codec(config_path, data_dir, out_dir, epochs, seed):
    """Fit the tiny autoencoder on the train split and freeze it."""
    cfg = _load_run_config(config_path)
    corpus = _corpus(data_dir or cfg.data.dir)
    out = Path(out_dir or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = np.stack(
        [corpus.load(it).image.transpose(2, 0, 1) for it in corpus.items("train")]
    )
    t0 = time.time()
    ae = codec_mod.train_autoencoder(
        images, epochs=epochs, seed=seed,
        log=lambda e, l: click.echo(f"codec epoch {e}: L1 {l:.4f}", err=True),
    )
    test_images = np.stack(
        [corpus.load(it).image.transpose(2, 0, 1) for it in corpus.items("test")]
    )
    recon = codec_mod.reconstruction_l1(ae, test_images)
    path = out / "codec.ckpt"
    codec_mod.save_codec(path, ae)
    _emit(
        {
            "command": "train-codec",
            "codec": str(path),
            "test_reconstruction_l1": recon,
            "epochs": epochs,
            "seed": seed,
            "manifest_hash": corpus.manifest["content_hash"],
            "elapsed_s": round(time.time() - t0, 2),
        },
        out / "train_codec_summary.json",
    )


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--non-hiera", is_flag=True, help="ablation: full prompt at every step")
@click.option("--non-pose", is_flag=True, help="ablation: no pose branch")
@click.option("--latent", is_flag=True, help="train in the codec's latent space")
@click.option("--codec", "codec_path", type=click.Path(exists=True), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
def train(config_path, data_dir, out_dir, non_hiera, non_pose, latent, codec_path,
          epochs, seed):
    """Train the conditional denoiser from scratch."""
    cfg = _load_run_config(config_path)
    out = Path(out_dir or cfg.paths.out_dir)
    tconf = cfg.train
    overrides = {}
    if non_hiera:
        overrides["non_hiera"] = True
    if non_pose:
        overrides["non_pose"] = True
    if epochs is not None:
        overrides["epochs"] = epochs
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        tconf = dataclasses.replace(tconf, **overrides)
    codec = _load_codec(codec_path or (cfg.paths.codec if latent else ""))
    ucfg = cfg.unet
    if latent:
        if codec.mode == "identity":
            raise click.ClickException("--latent needs a trained codec (--codec)")
        ucfg = UNetConfig.from_dict(
            {**ucfg.to_dict(), "in_channels": codec.latent_channels}
        )
    t0 = time.time()
    model, s, log_path = fit(
        tconf, Path(data_dir or cfg.data.dir) / "manifest.json", out,
        codec=codec, unet_config=ucfg,
    )
    _emit(
        {
            "command": "train",
            "model": str(out / "model.ckpt"),
            "log": str(log_path),
            "train_config": tconf.to_dict(),
            "config_digest": _digest(cfg.to_dict()),
            "model_digest": _file_digest(out / "model.ckpt"),
            "elapsed_s": round(time.time() - t0, 2),
        },
        out / "train_summary.json",
    )


def _parse_tokens(text: str) -> tuple:
    return tuple(t.strip() for t in text.split(",") if t.strip())


@main.command("sample")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--codec", "codec_path", type=click.Path(exists=True), default=None)
@click.option("--tokens", required=True,
              help="comma-separated high-level tokens, e.g. 'category:dress,style:navy,occasion:office'")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", type=click.Path(), default="draft.png")
def sample(config_path, model_path, codec_path, tokens, seed, out_path):
    """Synthesize a coarse draft from high-level concepts."""
    cfg = _load_run_config(config_path)
    model, meta = DiffusionModel.load(model_path)
    model.freeze()
    codec = _load_codec(codec_path)
    s = _schedule_from(cfg)
    scfg = dataclasses.replace(cfg.sampler, seed=seed)
    toks = _parse_tokens(tokens)
    try:
        img = synthesize_draft(toks, model, codec, s, scfg)
    except KeyError as e:
        raise click.ClickException(str(e))
    imageio.save_png(out_path, img)
    _emit(
        {
            "command": "sample",
            "out": str(out_path),
            "tokens": list(toks),
            "seed": seed,
            "steps": scfg.steps,
            "cfg_scale": scfg.cfg_scale,
            "image_sha256": hashlib.sha256(img.tobytes()).hexdigest()[:16],
            "model_digest": _file_digest(model_path),
        },
        Path(out_path).with_suffix(".json"),
    )


@main.command("edit")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--codec", "codec_path", type=click.Path(exists=True), default=None)
@click.option("--draft", "draft_path", type=click.Path(exists=True), required=True)
@click.option("--attribute", required=True, help="attribute category, e.g. clothing_length")
@click.option("--level", required=True, help="requested level, e.g. long")
@click.option("--hierarchy", "hierarchy_json", default=None,
              help="JSON file with the session hierarchy; defaults to a neutral one")
@click.option("--mask-rle", "mask_path", type=click.Path(exists=True), default=None)
@click.option("--rho", type=float, default=None)
@click.option("--inner-steps", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", type=click.Path(), default="edited.png")
def edit_cmd(config_path, model_path, codec_path, draft_path, attribute, level,
             hierarchy_json, mask_path, rho, inner_steps, seed, out_path):
    """Edit one low-level attribute of a draft inside its target region."""
    from .prompts import PromptHierarchy

    cfg = _load_run_config(config_path)
    model, _ = DiffusionModel.load(model_path)
    model.freeze()
    codec = _load_codec(codec_path)
    s = _schedule_from(cfg)
    draft = imageio.load_png(draft_path)
    kp = canonical_skeleton()
    if hierarchy_json:
        hierarchy = PromptHierarchy.from_dict(json.loads(Path(hierarchy_json).read_text()))
    else:
        low = [
            f"{a}:{data_mod.ATTRIBUTE_LEVELS[a][0]}"
            for a in ev.EDIT_LEVELS
        ]
        cats = [t.split(":")[0] for t in low]
        if attribute in cats:
            low[cats.index(attribute)] = f"{attribute}:{level}"
        hierarchy = PromptHierarchy(
            high=("category:dress", "style:navy", "occasion:office"), low=tuple(low)
        )
    if mask_path:
        mask = rle.decode(json.loads(Path(mask_path).read_text()))
    else:
        length_ctx = next(
            (t.split(":")[1] for t in hierarchy.low if t.startswith("clothing_length:")),
            "knee",
        )
        mask = mask_for(attribute, kp, RegionRules(clothing_length=length_ctx))
    req = EditRequest(
        draft=draft,
        attribute=attribute,
        level=level,
        mask=mask,
        rho=cfg.edit.rho if rho is None else rho,
        inner_steps=cfg.edit.inner_steps if inner_steps is None else inner_steps,
        keypoints=kp,
        seed=seed,
    )
    try:
        img = run_edit(req, model, codec, s, hierarchy, cfg.sampler)
    except (KeyError, ValueError) as e:
        raise click.ClickException(str(e))
    imageio.save_png(out_path, img)
    _emit(
        {
            "command": "edit",
            "out": str(out_path),
            "attribute": attribute,
            "level": level,
            "rho": req.rho,
            "inner_steps": req.inner_steps,
            "seed": seed,
            "non_target_l1": M.non_target_error(img, draft, mask),
            "image_sha256": hashlib.sha256(img.tobytes()).hexdigest()[:16],
        },
        Path(out_path).with_suffix(".json"),
    )


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--codec", "codec_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--n-drafts", type=int, default=None)
def eval_cmd(config_path, model_path, codec_path, data_dir, out_dir, n_drafts):
    """Score drafts and the L1..L5 sequential edit chain."""
    cfg = _load_run_config(config_path)
    out = Path(out_dir or cfg.paths.out_dir)
    corpus = _corpus(data_dir or cfg.data.dir)
    model, _ = DiffusionModel.load(model_path)
    model.freeze()
    codec = _load_codec(codec_path)
    s = _schedule_from(cfg)
    extractor, epath = _extractor_for(cfg, corpus, out)
    n = n_drafts or cfg.eval.n_drafts
    t0 = time.time()
    drafts = ev.draft_metrics(
        model, codec, s, extractor, corpus, n, cfg.sampler, cfg.eval.seed
    )
    levels = ev.sequential_edit_eval(
        model, codec, s, extractor, corpus, n, cfg.sampler,
        ev.EditParams(rho=cfg.edit.rho, inner_steps=cfg.edit.inner_steps),
        cfg.eval.seed,
    )
    fids = [levels["levels"][f"L{i}"]["desk_fid"] for i in range(1, 6)]
    cons = [levels["levels"][f"L{i}"]["consistency"] for i in range(1, 6)]
    _emit(
        {
            "command": "eval",
            "draft": drafts,
            "edit_levels": levels,
            "trends": {
                "fid_spearman_vs_level": ev.spearman([1, 2, 3, 4, 5], fids),
                "consistency_spearman_vs_level": ev.spearman([1, 2, 3, 4, 5], cons),
            },
            "model_digest": _file_digest(model_path),
            "extractor": str(epath),
            "manifest_hash": corpus.manifest["content_hash"],
            "elapsed_s": round(time.time() - t0, 2),
        },
        out / "eval_summary.json",
    )


@main.command("ablate")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--epochs", type=int, default=None, help="override training epochs for all runs")
@click.option("--n-drafts", type=int, default=None)
def ablate(config_path, data_dir, out_dir, epochs, n_drafts):
    """Train full / non-hiera / non-pose variants, evaluate all four rows."""
    cfg = _load_run_config(config_path)
    out = Path(out_dir or cfg.paths.out_dir)
    corpus_dir = Path(data_dir or cfg.data.dir)
    corpus = _corpus(corpus_dir)
    s = _schedule_from(cfg)
    n = n_drafts or cfg.eval.n_drafts
    tconf = cfg.train if epochs is None else dataclasses.replace(cfg.train, epochs=epochs)
    extractor, _ = _extractor_for(cfg, corpus, out)

    variants = {
        "full": {},
        "non_hiera": {"non_hiera": True},
        "non_pose": {"non_pose": True},
    }
    models = {}
    t0 = time.time()
    for name, flags in variants.items():
        run_conf = dataclasses.replace(tconf, **flags)
        run_dir = out / name
        click.echo(f"training {name} ...", err=True)
        model, _, _ = fit(
            run_conf, corpus_dir / "manifest.json", run_dir, unet_config=cfg.unet,
            quiet=True,
        )
        model.freeze()
        models[name] = model

    rows = {}
    for name, model in models.items():
        res = ev.sequential_edit_eval(
            model, _load_codec(""), s, extractor, corpus, n, cfg.sampler,
            ev.EditParams(rho=cfg.edit.rho, inner_steps=cfg.edit.inner_steps),
            cfg.eval.seed,
        )
        rows[name] = res["levels"]["L1"]
        _emit({"command": "ablate", "variant": name, **res},
              out / name / "ablate_summary.json")
    # non-mask shares the full model's weights; only the edit procedure changes
    res_nm = ev.sequential_edit_eval(
        models["full"], _load_codec(""), s, extractor, corpus, n, cfg.sampler,
        ev.EditParams(rho=0.0, inner_steps=0, non_mask=True), cfg.eval.seed,
    )
    rows["non_mask"] = res_nm["levels"]["L1"]
    _emit({"command": "ablate", "variant": "non_mask", **res_nm},
          out / "non_mask" / "ablate_summary.json")

    full_fid = rows["full"]["desk_fid"]
    ordering = {
        name: {"desk_fid": row["desk_fid"], "full_is_lower": full_fid < row["desk_fid"]}
        for name, row in rows.items()
        if name != "full"
    }
    _emit(
        {
            "command": "ablate",
            "l1_rows": rows,
            "ordering": ordering,
            "full_beats_all": all(v["full_is_lower"] for v in ordering.values()),
            "elapsed_s": round(time.time() - t0, 2),
        },
        out / "ablate_comparison.json",
    )


@main.command("serve")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--codec", "codec_path", type=click.Path(exists=True), default=None)
@click.option("--data-dir", type=click.Path(), default="studio_data")
@click.option("--port", type=int, default=8008)
@click.option("--host", default="127.0.0.1")
def serve(config_path, model_path, codec_path, data_dir, port, host):
    """Run the HTTP studio service."""
    import uvicorn

    from .service import build_app

    cfg = _load_run_config(config_path)
    app = build_app(
        model_path=model_path, codec_path=codec_path, data_dir=data_dir, run_config=cfg
    )
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
