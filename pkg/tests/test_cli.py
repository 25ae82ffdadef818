import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from hypersynth import synth_eval as se
from hypersynth.cli import (derive_seed, load_config, main,
                            read_endmembers_csv, write_endmembers_csv)
from hypersynth.errors import ConfigError
from hypersynth.hsi_core import load_abundance, save_abundance, save_cube


def _write_config(path, cube_path, out_dir, counts=(3,), extra=None):
    cfg = {
        "cubes": [str(cube_path)],
        "methods": {"ls": {"max_outer_iters": 5, "inner_iters": 5}},
        "endmember_counts": list(counts),
        "patch_size": [8, 8],
        "patch_stride": [8, 8],
        "schedule": {"T": 6, "beta_start": 1e-4, "beta_end": 0.05},
        "unet": {"base_width": 8, "level_widths": [1, 2], "levels": 2,
                 "attn_levels": [1], "heads": 2, "time_embed_dim": 16},
        "train": {"steps": 3, "batch_size": 4, "ema_decay": 0.99},
        "sample": {"n": 2, "size": [8, 8]},
        "seed": 1,
        "out_dir": str(out_dir),
    }
    if extra:
        cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole pipeline once on a small noisy scene."""
    root = tmp_path_factory.mktemp("pipeline")
    cube, E, A = se.generate_scene(
        se.SceneSpec(24, 24, 3, 8, dirichlet_alpha=0.3, snr_db=25.0, seed=4))
    cube_path = root / "scene.hsc"
    save_cube(cube, cube_path)
    out = root / "out"
    cfg_path = _write_config(root / "cfg.json", cube_path, out)
    for stage in ("unmix", "pool", "train", "sample"):
        assert main([stage, "--config", str(cfg_path)]) == 0
    assert main(["eval", "--config", str(cfg_path),
                 "--generated", str(out / "samples"),
                 "--reference", str(out / "pool" / "p3")]) == 0
    return {"root": root, "out": out, "cfg": cfg_path, "cube": cube_path,
            "truth": (E, A)}


def test_unmix_artifacts(pipeline):
    pair = pipeline["out"] / "unmix" / "scene__ls_p3"
    assert (pair / "abundance.hsc").is_file()
    assert (pair / "endmembers.csv").is_file()
    assert (pair / "abundance.png").is_file()
    assert (pair / "endmembers.png").is_file()
    trace = json.loads((pair / "trace.json").read_text())
    assert trace["method"] == "LS"
    vals = trace["objective_trace"]
    assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))
    stack = load_abundance(pair / "abundance.hsc")
    assert stack.channels == 3 and stack.strict_simplex


def test_pool_manifest(pipeline):
    manifest = json.loads(
        (pipeline["out"] / "pool" / "p3" / "manifest.json").read_text())
    assert manifest["p"] == 3
    # 24x24 stack, 8x8 patches at stride 8 -> 9 windows.
    assert len(manifest["patches"]) == 9
    for entry in manifest["patches"]:
        assert entry["source_id"] == "scene__ls_p3"
        stack = load_abundance(pipeline["out"] / "pool" / "p3" / entry["file"])
        assert stack.channels == 3


def test_train_artifacts(pipeline):
    train = pipeline["out"] / "train"
    assert (train / "ckpt.ntb").is_file()
    assert (train / "loss.png").is_file()
    lines = (train / "loss.csv").read_text().strip().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 4


def test_checkpoint_embeds_manifest_provenance(pipeline):
    from hypersynth.ntb import read_ntb
    _, meta = read_ntb(pipeline["out"] / "train" / "ckpt.ntb")
    manifest_path = Path(meta["manifest"])
    digest = hashlib.sha256(manifest_path.read_bytes()).hexdigest()
    assert meta["manifest_sha256"] == digest
    assert meta["step"] == 3


def test_sample_artifacts(pipeline):
    samples = pipeline["out"] / "samples"
    hscs = sorted(samples.glob("sample_*.hsc"))
    assert len(hscs) == 2
    assert len(sorted(samples.glob("*.pgm"))) == 6
    assert (samples / "montage.png").is_file()


def test_eval_artifacts(pipeline):
    ev = pipeline["out"] / "eval"
    report = json.loads((ev / "report.json").read_text())
    assert len(report["mean_gap"]) == 3
    assert (ev / "metrics.csv").is_file()
    assert (ev / "sum_violations.png").is_file()


def test_eval_with_recovery(pipeline):
    E, A = pipeline["truth"]
    root = pipeline["root"]
    write_endmembers_csv(E, root / "truth_endmembers.csv")
    save_abundance(A, root / "truth_abundance.hsc")
    pair = pipeline["out"] / "unmix" / "scene__ls_p3"
    code = main(["eval", "--config", str(pipeline["cfg"]),
                 "--generated", str(pipeline["out"] / "samples"),
                 "--reference", str(pipeline["out"] / "pool" / "p3"),
                 "--est-endmembers", str(pair / "endmembers.csv"),
                 "--truth-endmembers", str(root / "truth_endmembers.csv"),
                 "--est-abundance", str(pair / "abundance.hsc"),
                 "--truth-abundance", str(root / "truth_abundance.hsc")])
    assert code == 0
    recovery = json.loads(
        (pipeline["out"] / "eval" / "recovery.json").read_text())
    assert sorted(recovery["matched_permutation"]) == [0, 1, 2]
    assert recovery["abundance_rmse"] < 0.5


def test_rerun_reproduces_identical_artifacts(pipeline):
    # Same config and seed into a fresh directory: every byte identical.
    root = pipeline["root"]
    out2 = root / "out2"
    cfg2 = _write_config(root / "cfg2.json", pipeline["cube"], out2)
    for stage in ("unmix", "pool", "train", "sample"):
        assert main([stage, "--config", str(cfg2)]) == 0

    def digests(base):
        table = {}
        for f in sorted(base.rglob("*")):
            if f.is_file():
                data = f.read_bytes().replace(
                    str(base).encode(), b"@OUT@")
                table[str(f.relative_to(base))] = hashlib.sha256(
                    data).hexdigest()
        return table

    d1 = digests(pipeline["out"])
    d2 = digests(out2)
    for rel in d1:
        if rel.startswith("eval"):
            continue
        assert d1[rel] == d2[rel], rel


def test_resume_continues_training(pipeline, tmp_path):
    out3 = tmp_path / "out3"
    cfg3 = _write_config(tmp_path / "cfg3.json", pipeline["cube"], out3)
    for stage in ("unmix", "pool", "train"):
        assert main([stage, "--config", str(cfg3)]) == 0
    ckpt = out3 / "train" / "ckpt.ntb"
    assert main(["train", "--config", str(cfg3),
                 "--manifest", str(out3 / "pool" / "p3" / "manifest.json"),
                 "--resume", str(ckpt)]) == 0
    from hypersynth.ntb import read_ntb
    _, meta = read_ntb(ckpt)
    assert meta["step"] == 6
    lines = (out3 / "train" / "loss.csv").read_text().strip().splitlines()
    assert len(lines) == 7


def test_zero_step_training_equals_init(pipeline, tmp_path):
    import torch
    from hypersynth import diffusion
    from hypersynth.nn_denoiser import UNetConfig, init_params
    out4 = tmp_path / "out4"
    cfg4 = _write_config(tmp_path / "cfg4.json", pipeline["cube"], out4,
                         extra={"train": {"steps": 0}})
    for stage in ("unmix", "pool", "train"):
        assert main([stage, "--config", str(cfg4)]) == 0
    state = diffusion.load_checkpoint(out4 / "train" / "ckpt.ntb")
    assert state.step == 0
    cfg = load_config(cfg4)
    seed = derive_seed(cfg.seed, "train", 3)
    unet_opts = dict(cfg.unet)
    for key in ("level_widths", "attn_levels"):
        unet_opts[key] = tuple(unet_opts[key])
    fresh = init_params(
        UNetConfig(in_channels=3, seed=seed, **{k: v for k, v in
                                                unet_opts.items()
                                                if k != "seed"}))
    for name in fresh.weights:
        assert torch.equal(state.params.weights[name], fresh.weights[name])


def test_per_p_manifests_never_mixed(tmp_path):
    cube, _, _ = se.generate_scene(
        se.SceneSpec(16, 16, 3, 8, dirichlet_alpha=0.3, snr_db=25.0, seed=6))
    cube_path = tmp_path / "scene.hsc"
    save_cube(cube, cube_path)
    out = tmp_path / "out"
    cfg = _write_config(tmp_path / "cfg.json", cube_path, out, counts=(3, 4))
    assert main(["unmix", "--config", str(cfg)]) == 0
    assert main(["pool", "--config", str(cfg)]) == 0
    for p in (3, 4):
        manifest = json.loads(
            (out / "pool" / f"p{p}" / "manifest.json").read_text())
        assert manifest["p"] == p
        for entry in manifest["patches"]:
            assert entry["source_id"].endswith(f"_p{p}")
            stack = load_abundance(out / "pool" / f"p{p}" / entry["file"])
            assert stack.channels == p


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"cubes": [], "methods": {}}))
    assert main(["unmix", "--config", str(bad)]) == 2
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"cubes": [], "methods": {"ls": {}},
                                   "bogus": 1}))
    assert main(["unmix", "--config", str(unknown)]) == 2
    assert main(["eval", "--config", str(bad),
                 "--generated", str(tmp_path)]) == 2


def test_numerical_failure_exits_3(tmp_path):
    # Absurdly tight likelihood + wild proposals: the chain cannot mix.
    cube, _, _ = se.generate_scene(
        se.SceneSpec(16, 16, 3, 8, dirichlet_alpha=0.3, snr_db=30.0, seed=8))
    cube_path = tmp_path / "scene.hsc"
    save_cube(cube, cube_path)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "cubes": [str(cube_path)],
        "methods": {"st": {"noise_sigma": 1e-6,
                           "proposal_concentration": 1.0,
                           "n_samples": 15, "burn_in": 10}},
        "endmember_counts": [3],
        "out_dir": str(tmp_path / "out"),
    }))
    assert main(["unmix", "--config", str(cfg_path)]) == 3
    errors = json.loads(
        (tmp_path / "out" / "unmix" / "errors.json").read_text())
    assert "scene__st_p3" in errors


def test_sample_n_zero_writes_nothing(pipeline, tmp_path):
    out5 = tmp_path / "out5"
    out5.mkdir()
    cfg5 = _write_config(tmp_path / "cfg5.json", pipeline["cube"], out5)
    # Reuse the trained checkpoint from the main pipeline run.
    ckpt = pipeline["out"] / "train" / "ckpt.ntb"
    assert main(["sample", "--config", str(cfg5),
                 "--checkpoint", str(ckpt), "--n", "0"]) == 0
    assert list((out5 / "samples").glob("*.hsc")) == []


def test_seed_and_out_overrides(tmp_path, pipeline):
    cfg = load_config(pipeline["cfg"], seed_override=9,
                      out_override=tmp_path / "o")
    assert cfg.seed == 9
    assert cfg.out_dir == str(tmp_path / "o")


def test_derive_seed_stable():
    a = derive_seed(1, "train", 3)
    assert a == derive_seed(1, "train", 3)
    assert a != derive_seed(1, "train", 4)
    assert a != derive_seed(2, "train", 3)


def test_endmember_csv_roundtrip(tmp_path, rng):
    from hypersynth.hsi_core import EndmemberMatrix
    E = EndmemberMatrix(signatures=rng.uniform(0.1, 0.9, size=(6, 3)))
    path = tmp_path / "e.csv"
    write_endmembers_csv(E, path)
    back = read_endmembers_csv(path)
    assert np.allclose(back.signatures, E.signatures, atol=1e-7)
    (tmp_path / "junk.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        read_endmembers_csv(tmp_path / "junk.csv")
