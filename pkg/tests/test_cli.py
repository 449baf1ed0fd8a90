"""CLI: config parsing, data generation determinism, sample/edit round trips."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from draftdiff import dataset as D
from draftdiff.cli import main
from draftdiff.config import RunConfig, load_config, parse_config
from draftdiff.trainer import DiffusionModel
from draftdiff.unet import UNetConfig


class TestConfig:
    def test_defaults_without_file(self):
        cfg = load_config(None)
        assert cfg.train.epochs >= 1
        assert cfg.sampler.steps == 100
        assert cfg.sampler.cfg_scale == 7.5
        assert cfg.train.timesteps == 1000

    def test_unknown_section_rejected(self):
        with pytest.raises(ValueError, match="unknown sections"):
            parse_config({"optimizer": {}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown keys"):
            parse_config({"train": {"learning_rat": 1e-4}})

    def test_toml_round_trip(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text(
            "[train]\nepochs = 2\nseed = 9\n\n[sampler]\nsteps = 50\n\n"
            "[data]\nn_per_category = 10\n"
        )
        cfg = load_config(p)
        assert cfg.train.epochs == 2 and cfg.train.seed == 9
        assert cfg.sampler.steps == 50
        assert cfg.data.n_per_category == 10

    def test_json_config(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text(json.dumps({"edit": {"rho": 0.25}}))
        assert load_config(p).edit.rho == 0.25

    def test_bad_extension(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text("train: {}")
        with pytest.raises(ValueError, match="toml or .json"):
            load_config(p)


class TestGenData:
    def test_deterministic_manifest_hash(self, tmp_path):
        runner = CliRunner()
        for sub in ("a", "b"):
            r = runner.invoke(
                main,
                ["gen-data", "--seed", "7", "--n-per-category", "2",
                 "--out", str(tmp_path / sub)],
            )
            assert r.exit_code == 0, r.output
        ma = json.loads((tmp_path / "a" / "gen_data_summary.json").read_text())
        mb = json.loads((tmp_path / "b" / "gen_data_summary.json").read_text())
        assert ma["manifest_hash"] == mb["manifest_hash"]
        assert ma["n_items"] == 12


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    D.generate_corpus(3, seed=2, out_dir=data)
    tiny = UNetConfig(
        in_channels=3, base_channels=8, channel_multipliers=(1, 2), res_blocks=1,
        time_embed_dim=16, cond_embed_dim=16, pose_channels=14, groups=4,
    )
    vocab = D.build_vocabulary(embedding_dim=16)
    model = DiffusionModel(vocab, tiny, rng=np.random.default_rng(0))
    model_path = root / "model.ckpt"
    model.save(model_path, {"train_config": {}})
    cfg = root / "run.toml"
    cfg.write_text(
        "[sampler]\nsteps = 5\ncfg_scale = 1.5\n\n[train]\nembedding_dim = 16\n"
    )
    return root, data, model_path, cfg


class TestSampleEdit:
    def test_sample_writes_png_and_summary(self, tiny_setup, tmp_path):
        root, data, model_path, cfg = tiny_setup
        out = tmp_path / "draft.png"
        runner = CliRunner()
        r = runner.invoke(
            main,
            ["sample", "--config", str(cfg), "--model", str(model_path),
             "--tokens", "category:dress,style:navy,occasion:office",
             "--seed", "4", "--out", str(out)],
        )
        assert r.exit_code == 0, r.output
        assert out.exists()
        summary = json.loads(out.with_suffix(".json").read_text())
        assert summary["seed"] == 4

    def test_sample_determinism_via_hash(self, tiny_setup, tmp_path):
        root, data, model_path, cfg = tiny_setup
        runner = CliRunner()
        hashes = []
        for name in ("x.png", "y.png"):
            out = tmp_path / name
            r = runner.invoke(
                main,
                ["sample", "--config", str(cfg), "--model", str(model_path),
                 "--tokens", "category:coat,style:olive,occasion:sport",
                 "--seed", "9", "--out", str(out)],
            )
            assert r.exit_code == 0, r.output
            hashes.append(json.loads(out.with_suffix(".json").read_text())["image_sha256"])
        assert hashes[0] == hashes[1]

    def test_unknown_token_fails_nonzero(self, tiny_setup, tmp_path):
        root, data, model_path, cfg = tiny_setup
        runner = CliRunner()
        r = runner.invoke(
            main,
            ["sample", "--config", str(cfg), "--model", str(model_path),
             "--tokens", "category:spaceship", "--seed", "1",
             "--out", str(tmp_path / "z.png")],
        )
        assert r.exit_code != 0

    def test_edit_round_trip(self, tiny_setup, tmp_path):
        root, data, model_path, cfg = tiny_setup
        runner = CliRunner()
        draft_path = tmp_path / "d.png"
        r = runner.invoke(
            main,
            ["sample", "--config", str(cfg), "--model", str(model_path),
             "--tokens", "category:dress,style:navy,occasion:office",
             "--seed", "3", "--out", str(draft_path)],
        )
        assert r.exit_code == 0, r.output
        out = tmp_path / "e.png"
        r = runner.invoke(
            main,
            ["edit", "--config", str(cfg), "--model", str(model_path),
             "--draft", str(draft_path), "--attribute", "clothing_length",
             "--level", "long", "--seed", "5", "--out", str(out)],
        )
        assert r.exit_code == 0, r.output
        summary = json.loads(out.with_suffix(".json").read_text())
        assert summary["non_target_l1"] >= 0.0


def test_train_command_smoke(tiny_setup, tmp_path):
    root, data, model_path, cfg = tiny_setup
    run_cfg = tmp_path / "t.toml"
    run_cfg.write_text(
        "[train]\nepochs = 1\nbatch_size = 8\nembedding_dim = 16\npose_prob = 0.0\n\n"
        "[unet]\nbase_channels = 8\nchannel_multipliers = [1, 2]\nres_blocks = 1\n"
        "time_embed_dim = 16\ncond_embed_dim = 16\ngroups = 4\n"
    )
    runner = CliRunner()
    r = runner.invoke(
        main,
        ["train", "--config", str(run_cfg), "--data", str(data),
         "--out", str(tmp_path / "run")],
    )
    assert r.exit_code == 0, r.output
    assert (tmp_path / "run" / "model.ckpt").exists()
    summary = json.loads((tmp_path / "run" / "train_summary.json").read_text())
    assert summary["command"] == "train"
    assert "model_digest" in summary
