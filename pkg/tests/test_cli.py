"""CLI: verb dispatch, exit codes, config parsing, byte-identical artifacts."""

from pathlib import Path

import numpy as np
import pytest

from retexture import cli, dataio, generator as gen_mod, idnet
from retexture.generator import GeneratorConfig
from retexture.rendering import ImageTensor


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Body model + tiny dataset (2 ids x 6 views at 64x32) built via the CLI."""
    ws = tmp_path_factory.mktemp("cli")
    assert cli.dispatch(["make-body", "--out", str(ws / "body.npz")]) == 0
    assert cli.dispatch([
        "synth-data", "--ids", "2", "--views", "6",
        "--image-dims", "64x32", "--texture-dims", "16x16",
        "--seed", "0", "--out", str(ws / "data"),
    ]) == 0
    return ws


@pytest.fixture(scope="session")
def train_cfg_file(workspace):
    path = workspace / "train.cfg"
    path.write_text(
        "# desk-scale training settings\n"
        "image_dims = 64x32\n"
        "texture_dims = 16x16\n"
        "gen_depth = 2\n"
        "gen_base_channels = 4\n"
        "groups_per_batch = 2\n"
        "images_per_group = 2\n"
        "batch_size = 4\n"
        "loss_variant = pixel_l1\n"
    )
    return path


@pytest.fixture(scope="session")
def tiny_checkpoint(workspace):
    cfg = GeneratorConfig(in_dims=(64, 32, 3), out_dims=(16, 16, 3), depth=2,
                          base_channels=4, seed=0)
    path = workspace / "gen.npz"
    gen_mod.save_checkpoint(gen_mod.generator_init(cfg), path)
    return path


def _first_image(workspace) -> Path:
    return sorted((workspace / "data" / "images").glob("*.png"))[0]


def _sidecar_of(image: Path) -> Path:
    return image.with_name(image.name + dataio.SIDECAR_SUFFIX)


class TestUsageErrors:
    def test_unknown_verb_exits_2(self, capsys):
        assert cli.dispatch(["bogus"]) == 2
        capsys.readouterr()

    def test_unknown_flag_exits_2(self, capsys):
        assert cli.dispatch(["make-body", "--out", "x", "--frobnicate"]) == 2
        capsys.readouterr()

    def test_no_verb_exits_2(self, capsys):
        assert cli.dispatch([]) == 2
        capsys.readouterr()

    def test_help_exits_0(self, capsys):
        assert cli.dispatch(["--help"]) == 0
        assert "make-body" in capsys.readouterr().out

    def test_per_verb_help(self, capsys):
        assert cli.dispatch(["train", "--help"]) == 0
        out = capsys.readouterr().out
        assert "--seed" in out and "--config" in out

    def test_every_verb_accepts_seed_and_config(self):
        parser = cli.build_parser()
        verbs = ["make-body", "synth-data", "precompute", "train-idnet", "train",
                 "generate", "render", "evaluate", "ablate"]
        for action in parser._subparsers._group_actions:
            for verb in verbs:
                opts = action.choices[verb]._option_string_actions
                assert "--seed" in opts and "--config" in opts, verb


class TestConfigFile:
    def test_parse_key_values(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("learning_rate = 0.001  # tuned\n\nepochs = 3\n")
        values = cli.parse_config_file(path)
        assert values == {"learning_rate": "0.001", "epochs": "3"}

    def test_values_applied(self):
        cfg = cli.train_config_from(
            {"learning_rate": "0.001", "image_dims": "64x32", "lambda_reid": "10"}
        )
        assert cfg.learning_rate == 0.001
        assert cfg.image_dims == (64, 32)
        assert cfg.weights.lambda_reid == 10.0
        assert cfg.weights.lambda_face == 1.0

    def test_seed_flag_overrides(self):
        assert cli.train_config_from({"seed": "3"}, seed=7).seed == 7

    def test_unknown_key_exits_1(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("learnig_rate = 0.1\n")
        code = cli.dispatch([
            "train", "--data", str(workspace / "data"), "--body",
            str(workspace / "body.npz"), "--cache", str(tmp_path / "c"),
            "--out", str(tmp_path / "o"), "--config", str(bad),
        ])
        assert code == 1
        assert "learnig_rate" in capsys.readouterr().err

    def test_malformed_line_exits_1(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("just some words\n")
        code = cli.dispatch([
            "train", "--data", str(workspace / "data"), "--body",
            str(workspace / "body.npz"), "--cache", str(tmp_path / "c"),
            "--out", str(tmp_path / "o"), "--config", str(bad),
        ])
        assert code == 1
        assert "=" in capsys.readouterr().err


class TestDataVerbs:
    def test_make_body_output_loads(self, workspace):
        from retexture import bodymodel

        spec = bodymodel.load_model(workspace / "body.npz")
        assert spec.num_vertices > 0

    def test_synth_data_layout(self, workspace):
        images = sorted((workspace / "data" / "images").glob("*.png"))
        assert len(images) == 12
        for img in images:
            assert _sidecar_of(img).exists()
        assert len(list((workspace / "data" / "textures").glob("*.png"))) == 2

    def test_precompute_writes_caches(self, workspace, tmp_path, capsys):
        cache = tmp_path / "cache"
        code = cli.dispatch([
            "precompute", "--data", str(workspace / "data"),
            "--body", str(workspace / "body.npz"), "--cache", str(cache),
            "--image-dims", "64x32", "--texture-dims", "16x16",
        ])
        assert code == 0
        assert len(list(cache.glob("*" + dataio.CACHE_SUFFIX))) == 12
        assert "cached 12" in capsys.readouterr().out


class TestTrainVerbs:
    def test_missing_cache_names_precompute(self, workspace, train_cfg_file,
                                            tmp_path, capsys):
        code = cli.dispatch([
            "train", "--data", str(workspace / "data"),
            "--body", str(workspace / "body.npz"),
            "--cache", str(tmp_path / "empty"), "--out", str(tmp_path / "run"),
            "--config", str(train_cfg_file),
        ])
        assert code == 1
        assert "precompute" in capsys.readouterr().err

    def test_train_writes_checkpoints_and_log(self, workspace, train_cfg_file,
                                              tmp_path, capsys):
        out = tmp_path / "run"
        code = cli.dispatch([
            "train", "--data", str(workspace / "data"),
            "--body", str(workspace / "body.npz"),
            "--cache", str(tmp_path / "cache"), "--out", str(out),
            "--config", str(train_cfg_file), "--iterations", "2",
            "--precompute", "--seed", "0",
        ])
        assert code == 0
        assert (out / "checkpoint_final.npz").exists()
        log = (out / "train.log").read_text().splitlines()
        assert log[0].startswith("iter=1 ")
        assert "trained 2 iterations" in capsys.readouterr().out

    def test_train_idnet_saves_gated_net(self, workspace, tmp_path, capsys):
        out = tmp_path / "idnet.npz"
        cfg = tmp_path / "idnet.cfg"
        cfg.write_text("max_epochs = 8\nn_restarts = 0\n")
        code = cli.dispatch([
            "train-idnet", "--data", str(workspace / "data"),
            "--out", str(out), "--seed", "0", "--config", str(cfg),
        ])
        assert code == 0
        net = idnet.load_idnet(out)
        assert net.config.n_classes == 2
        assert "held-out top-1" in capsys.readouterr().out


class TestGenerateRender:
    def test_generate_byte_identical(self, workspace, tiny_checkpoint, tmp_path,
                                     capsys):
        img = _first_image(workspace)
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        for out in (a, b):
            assert cli.dispatch([
                "generate", "--checkpoint", str(tiny_checkpoint),
                "--image", str(img), "--out", str(out),
            ]) == 0
        capsys.readouterr()
        assert a.read_bytes() == b.read_bytes()

    def test_render_texture(self, workspace, tmp_path, capsys):
        img = _first_image(workspace)
        texture = sorted((workspace / "data" / "textures").glob("*.png"))[0]
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        for out in (a, b):
            assert cli.dispatch([
                "render", "--body", str(workspace / "body.npz"),
                "--texture", str(texture), "--sidecar", str(_sidecar_of(img)),
                "--image-dims", "64x32", "--out", str(out),
            ]) == 0
        capsys.readouterr()
        assert a.read_bytes() == b.read_bytes()
        assert dataio.load_image(a).pixels.shape == (64, 32, 3)

    def test_progress_strip_panel_count(self, workspace, tiny_checkpoint,
                                        tmp_path, capsys):
        img = _first_image(workspace)
        for n_ckpts, out_name in ((1, "one.png"), (3, "three.png")):
            out = tmp_path / out_name
            assert cli.dispatch([
                "render", "--body", str(workspace / "body.npz"),
                "--sidecar", str(_sidecar_of(img)), "--image", str(img),
                "--checkpoints", *([str(tiny_checkpoint)] * n_ckpts),
                "--out", str(out),
            ]) == 0
            strip = dataio.load_image(out).pixels
            assert strip.shape == (64, 32 * (n_ckpts + 1), 3)
        capsys.readouterr()

    def test_progress_strip_missing_checkpoint(self, workspace, tiny_checkpoint,
                                               tmp_path, capsys):
        img = _first_image(workspace)
        missing = tmp_path / "nope.npz"
        code = cli.dispatch([
            "render", "--body", str(workspace / "body.npz"),
            "--sidecar", str(_sidecar_of(img)), "--image", str(img),
            "--checkpoints", str(tiny_checkpoint), str(missing),
            "--out", str(tmp_path / "strip.png"),
        ])
        assert code == 1
        assert "nope.npz" in capsys.readouterr().err


class TestEvaluateAblate:
    def test_evaluate_writes_report(self, workspace, tiny_checkpoint, tmp_path,
                                    capsys):
        out = tmp_path / "report.json"
        code = cli.dispatch([
            "evaluate", "--checkpoint", str(tiny_checkpoint),
            "--data", str(workspace / "data"),
            "--body", str(workspace / "body.npz"), "--out", str(out),
        ])
        assert code == 0
        assert out.exists()
        assert "mask_ssim=" in capsys.readouterr().out

    def test_ablate_prints_table(self, workspace, train_cfg_file, tmp_path,
                                 capsys):
        net = idnet.idnet_init(
            idnet.IdNetConfig(in_dims=(64, 32, 3), base_channels=4, n_parts=2,
                              n_classes=2, seed=0)
        )
        idnet_path = tmp_path / "idnet.npz"
        idnet.save_idnet(net, idnet_path)
        out = tmp_path / "ablation.txt"
        code = cli.dispatch([
            "ablate", "--data", str(workspace / "data"),
            "--body", str(workspace / "body.npz"), "--idnet", str(idnet_path),
            "--cache", str(tmp_path / "cache"), "--grid", "pixel_l1",
            "--iterations", "1", "--config", str(train_cfg_file),
            "--seed", "0", "--out", str(out),
        ])
        assert code == 0
        assert "pixel_l1" in capsys.readouterr().out
        assert out.exists()
