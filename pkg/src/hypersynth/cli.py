"""Pipeline orchestration: unmix -> pool -> train -> sample -> eval.

One JSON config document drives every stage; each stage is a subcommand and
every artifact it writes is a deterministic function of (config, seed).
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
import numpy as np

from . import diffusion, report, synth_eval, unmix_dl, unmix_ls, unmix_st
from .errors import ConfigError, HypersynthError
from .hsi_core import (AbundanceStack, EndmemberMatrix, HyperCube, Patch,
                       drop_bands, extract_patches, load_abundance, load_cube,
                       normalize_cube, save_abundance)
from .nn_denoiser import UNetConfig


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    cubes: List[str]
    methods: Dict[str, dict]
    endmember_counts: List[int] = field(default_factory=lambda: [3, 4, 5])
    drop_band_list: List[int] = field(default_factory=list)
    patch_size: Tuple[int, int] = (32, 32)
    patch_stride: Tuple[int, int] = (16, 16)
    pool_per_method: bool = False
    schedule: dict = field(default_factory=lambda: {
        "T": 200, "beta_start": 1e-4, "beta_end": 0.2})
    unet: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sample: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one unmixing method is required")
        for m in self.methods:
            if m not in ("ls", "dl", "st"):
                raise ConfigError(f"unknown unmixing method {m!r}")
        for p in self.endmember_counts:
            if p < 2:
                raise ConfigError("endmember counts must be >= 2")


def load_config(path, seed_override=None, out_override=None) -> PipelineConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    try:
        cfg = PipelineConfig(**raw)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    cfg.patch_size = tuple(cfg.patch_size)
    cfg.patch_stride = tuple(cfg.patch_stride)
    if seed_override is not None:
        cfg.seed = seed_override
    if out_override is not None:
        cfg.out_dir = str(out_override)
    return cfg


def derive_seed(master: int, *parts) -> int:
    """Stable per-task seed derived from the master seed and string/int tags."""
    entropy = [master & 0xFFFFFFFF]
    for part in parts:
        if isinstance(part, str):
            entropy.append(zlib.crc32(part.encode("utf-8")))
        else:
            entropy.append(int(part) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Endmember CSV
# ---------------------------------------------------------------------------

def write_endmembers_csv(endmembers: EndmemberMatrix, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["band"] + [f"e{j}" for j in range(endmembers.count)])
        for b in range(endmembers.bands):
            writer.writerow([b] + [f"{endmembers.signatures[b, j]:.8g}"
                                   for j in range(endmembers.count)])


def read_endmembers_csv(path) -> EndmemberMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != "band":
        raise ConfigError(f"{path}: not an endmember CSV")
    data = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return EndmemberMatrix(signatures=data)


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def run_unmix(cfg: PipelineConfig) -> dict:
    out_root = Path(cfg.out_dir) / "unmix"
    out_root.mkdir(parents=True, exist_ok=True)
    errors = {}
    n_ok = 0
    for cube_path in cfg.cubes:
        stem = Path(cube_path).stem
        cube = load_cube(cube_path)
        if cfg.drop_band_list:
            cube = drop_bands(cube, cfg.drop_band_list)
        cube = normalize_cube(cube)
        for method, method_cfg in sorted(cfg.methods.items()):
            for p in cfg.endmember_counts:
                tag = f"{stem}__{method}_p{p}"
                try:
                    result = _run_one_unmix(cube, method, dict(method_cfg), p,
                                            derive_seed(cfg.seed, stem, method, p))
                    pair_dir = out_root / tag
                    pair_dir.mkdir(parents=True, exist_ok=True)
                    save_abundance(result.abundances, pair_dir / "abundance.hsc")
                    write_endmembers_csv(result.endmembers,
                                         pair_dir / "endmembers.csv")
                    with open(pair_dir / "trace.json", "w") as f:
                        json.dump({"method": result.method_tag, "p": p,
                                   "source": stem,
                                   "objective_trace": result.objective_trace},
                                  f, indent=2, sort_keys=True)
                        f.write("\n")
                    report.abundance_figure(result.abundances.data,
                                            pair_dir / "abundance.png",
                                            title=tag)
                    report.endmember_figure(result.endmembers,
                                            pair_dir / "endmembers.png")
                    n_ok += 1
                except HypersynthError as e:
                    errors[tag] = str(e)
    if errors:
        with open(out_root / "errors.json", "w") as f:
            json.dump(errors, f, indent=2, sort_keys=True)
            f.write("\n")
    if n_ok == 0:
        raise HypersynthError(f"every unmixing pair failed: {errors}")
    return errors


def _run_one_unmix(cube: HyperCube, method: str, method_cfg: dict, p: int,
                   seed: int):
    method_cfg.pop("endmember_count", None)
    method_cfg.setdefault("seed", seed)
    if method == "ls":
        ls_cfg = unmix_ls.LsConfig(endmember_count=p, **method_cfg)
        return unmix_ls.alternating_minimize(cube, ls_cfg)
    if method == "dl":
        if "hidden_widths" in method_cfg:
            method_cfg["hidden_widths"] = tuple(method_cfg["hidden_widths"])
        ae_cfg = unmix_dl.AeConfig(endmember_count=p, **method_cfg)
        return unmix_dl.ae_train(cube, ae_cfg)[1]
    if method == "st":
        st_cfg = unmix_st.StConfig(endmember_count=p, **method_cfg)
        return unmix_st.gibbs_unmix(cube, st_cfg)
    raise ConfigError(f"unknown method {method!r}")


def run_pool(cfg: PipelineConfig) -> List[Path]:
    unmix_root = Path(cfg.out_dir) / "unmix"
    pool_root = Path(cfg.out_dir) / "pool"
    stacks = []
    for pair_dir in sorted(unmix_root.iterdir()) if unmix_root.is_dir() else []:
        hsc = pair_dir / "abundance.hsc"
        if hsc.is_file():
            stacks.append((pair_dir.name, load_abundance(hsc)))
    manifests = []
    for p in sorted(set(cfg.endmember_counts)):
        matching = [(tag, s) for tag, s in stacks if s.channels == p]
        if not matching:
            raise ConfigError(f"no abundance stacks with {p} channels to pool")
        if cfg.pool_per_method:
            groups = {}
            for tag, s in matching:
                method = tag.rsplit("__", 1)[1].split("_p")[0]
                groups.setdefault(method, []).append((tag, s))
        else:
            groups = {"all": matching}
        for gname, members in sorted(groups.items()):
            ds_dir = pool_root / (f"p{p}" if gname == "all" else f"p{p}__{gname}")
            (ds_dir / "patches").mkdir(parents=True, exist_ok=True)
            entries = []
            for tag, stack in members:
                for pt in extract_patches(stack, cfg.patch_size,
                                          cfg.patch_stride, source_id=tag):
                    entries.append((pt, tag))
            rng = np.random.default_rng(derive_seed(cfg.seed, "pool", p, gname))
            order = rng.permutation(len(entries))
            manifest = []
            for rank, idx in enumerate(order):
                pt, tag = entries[idx]
                fname = f"patch_{rank:05d}.hsc"
                stack = AbundanceStack(data=pt.data, strict_simplex=True)
                save_abundance(stack, ds_dir / "patches" / fname)
                manifest.append({
                    "file": f"patches/{fname}",
                    "source_id": tag,
                    "origin": list(pt.origin),
                })
            manifest_path = ds_dir / "manifest.json"
            with open(manifest_path, "w") as f:
                json.dump({"p": p, "group": gname,
                           "patch_size": list(cfg.patch_size),
                           "seed": cfg.seed, "patches": manifest},
                          f, indent=2, sort_keys=True)
                f.write("\n")
            manifests.append(manifest_path)
    return manifests


def _load_manifest_patches(manifest_path: Path):
    with open(manifest_path) as f:
        manifest = json.load(f)
    base = manifest_path.parent
    patches = []
    for entry in manifest["patches"]:
        stack = load_abundance(base / entry["file"])
        patches.append(Patch(origin=tuple(entry["origin"]), data=stack.data,
                             source_id=entry["source_id"]))
    if not patches:
        raise ConfigError(f"{manifest_path}: empty patch manifest")
    return manifest, patches


def run_train(cfg: PipelineConfig, manifest_path: Optional[str] = None,
              resume: Optional[str] = None) -> Path:
    if manifest_path is None:
        candidates = sorted(Path(cfg.out_dir).glob("pool/*/manifest.json"))
        if not candidates:
            raise ConfigError("no patch manifest found; run `pool` first")
        manifest_path = candidates[0]
    manifest_path = Path(manifest_path)
    manifest, patches = _load_manifest_patches(manifest_path)
    p = manifest["p"]

    train_opts = dict(cfg.train)
    steps = int(train_opts.pop("steps", 1000))
    batch_size = int(train_opts.pop("batch_size", 16))
    checkpoint_every = int(train_opts.pop("checkpoint_every", 0))
    train_config = diffusion.TrainConfig(**train_opts)

    if resume is not None:
        state = diffusion.load_checkpoint(resume)
    else:
        sched_opts = dict(cfg.schedule)
        schedule = diffusion.make_linear_schedule(
            int(sched_opts.get("T", 200)),
            float(sched_opts.get("beta_start", 1e-4)),
            float(sched_opts.get("beta_end", 0.2)))
        unet_opts = dict(cfg.unet)
        for key in ("level_widths", "attn_levels"):
            if key in unet_opts:
                unet_opts[key] = tuple(unet_opts[key])
        net_config = UNetConfig(in_channels=p, **unet_opts)
        state = diffusion.make_train_state(
            net_config, schedule, train_config,
            seed=derive_seed(cfg.seed, "train", p))

    train_dir = Path(cfg.out_dir) / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    extra = {"manifest_sha256": _sha256(manifest_path),
             "manifest": str(manifest_path)}
    batch_rng = np.random.default_rng(
        derive_seed(cfg.seed, "batches", p, state.step))
    for k in range(steps):
        idx = batch_rng.integers(0, len(patches), size=batch_size)
        diffusion.train_step(state, [patches[i] for i in idx])
        if checkpoint_every and (k + 1) % checkpoint_every == 0:
            diffusion.save_checkpoint(
                state, train_dir / f"ckpt_step{state.step}.ntb", extra)
    final = train_dir / "ckpt.ntb"
    diffusion.save_checkpoint(state, final, extra)
    diffusion.write_loss_csv(state.loss_history, train_dir / "loss.csv")
    report.loss_figure(state.loss_history, train_dir / "loss.png")
    return final


def run_sample(cfg: PipelineConfig, checkpoint: Optional[str] = None,
               n: Optional[int] = None) -> Path:
    if checkpoint is None:
        checkpoint = Path(cfg.out_dir) / "train" / "ckpt.ntb"
    state = diffusion.load_checkpoint(checkpoint)
    opts = dict(cfg.sample)
    if n is None:
        n = int(opts.get("n", 8))
    size = tuple(opts.get("size", cfg.patch_size))
    use_ema = bool(opts.get("use_ema", True))
    project = bool(opts.get("project_simplex", False))
    leading = opts.get("leading", "per_step")

    out_dir = Path(cfg.out_dir) / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)
    patches = diffusion.sample(state, n, size,
                               seed=derive_seed(cfg.seed, "sample"),
                               use_ema=use_ema, leading=leading,
                               project_simplex=project)
    for i, pt in enumerate(patches):
        stack = AbundanceStack(data=pt.data, strict_simplex=project)
        save_abundance(stack, out_dir / f"sample_{i:04d}.hsc")
        for j in range(pt.channels):
            report.write_pgm(pt.data[j], out_dir / f"sample_{i:04d}_ch{j}.pgm")
    if patches:
        report.montage_figure(patches, out_dir / "montage.png")
    return out_dir


def _load_patch_dir(path) -> List[Patch]:
    path = Path(path)
    if (path / "manifest.json").is_file():
        return _load_manifest_patches(path / "manifest.json")[1]
    files = sorted(path.glob("*.hsc"))
    if not files:
        raise ConfigError(f"no patches found under {path}")
    return [Patch(origin=(0, 0), data=load_abundance(f).data,
                  source_id=f.name) for f in files]


def run_eval(cfg: PipelineConfig, generated: str, reference: str,
             est_endmembers: Optional[str] = None,
             truth_endmembers: Optional[str] = None,
             est_abundance: Optional[str] = None,
             truth_abundance: Optional[str] = None) -> Path:
    gen = _load_patch_dir(generated)
    ref = _load_patch_dir(reference)
    stats = synth_eval.sample_statistics(gen, ref)

    out_dir = Path(cfg.out_dir) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    stats.to_json(out_dir / "report.json")
    stats.to_csv(out_dir / "metrics.csv")
    report.violation_histogram(gen, out_dir / "sum_violations.png")
    report.montage_figure(gen[:8], out_dir / "generated_montage.png")
    report.montage_figure(ref[:8], out_dir / "reference_montage.png")

    if est_endmembers and truth_endmembers:
        est_E = read_endmembers_csv(est_endmembers)
        truth_E = read_endmembers_csv(truth_endmembers)
        if est_abundance and truth_abundance:
            recovery = synth_eval.recovery_report(
                est_E, load_abundance(est_abundance),
                truth_E, load_abundance(truth_abundance))
        else:
            perm, sads = synth_eval.match_endmembers(est_E, truth_E)
            recovery = synth_eval.EvalReport(matched_permutation=perm,
                                             sad_degrees=sads)
        recovery.to_json(out_dir / "recovery.json")
        report.endmember_figure(est_E, out_dir / "endmembers.png",
                                reference=truth_E)
    return out_dir


# ---------------------------------------------------------------------------
# Command-line interface
# ---------------------------------------------------------------------------

def _common(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(exists=True, dir_okay=False))(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None)(fn)
    return fn


@click.group()
def cli():
    """Blind unmixing and diffusion-based synthesis of abundance maps."""


@cli.command("unmix")
@_common
def cmd_unmix(config_path, seed, out_dir):
    """Run every configured (method, endmember count) pair."""
    run_unmix(load_config(config_path, seed, out_dir))


@cli.command("pool")
@_common
def cmd_pool(config_path, seed, out_dir):
    """Extract and shuffle training patches from unmixing results."""
    run_pool(load_config(config_path, seed, out_dir))


@cli.command("train")
@_common
@click.option("--manifest", default=None, type=click.Path(exists=True))
@click.option("--resume", default=None, type=click.Path(exists=True))
def cmd_train(config_path, seed, out_dir, manifest, resume):
    """Train the denoiser on a pooled patch dataset."""
    run_train(load_config(config_path, seed, out_dir), manifest, resume)


@cli.command("sample")
@_common
@click.option("--checkpoint", default=None, type=click.Path(exists=True))
@click.option("--n", type=int, default=None)
def cmd_sample(config_path, seed, out_dir, checkpoint, n):
    """Generate abundance patches from a trained checkpoint."""
    run_sample(load_config(config_path, seed, out_dir), checkpoint, n)


@cli.command("eval")
@_common
@click.option("--generated", required=True, type=click.Path(exists=True))
@click.option("--reference", required=True, type=click.Path(exists=True))
@click.option("--est-endmembers", default=None, type=click.Path(exists=True))
@click.option("--truth-endmembers", default=None, type=click.Path(exists=True))
@click.option("--est-abundance", default=None, type=click.Path(exists=True))
@click.option("--truth-abundance", default=None, type=click.Path(exists=True))
def cmd_eval(config_path, seed, out_dir, generated, reference, est_endmembers,
             truth_endmembers, est_abundance, truth_abundance):
    """Score generated patches against a reference set."""
    run_eval(load_config(config_path, seed, out_dir), generated, reference,
             est_endmembers, truth_endmembers, est_abundance, truth_abundance)


def main(argv=None) -> int:
    threads = os.environ.get("HYPERSYNTH_THREADS")
    if threads:
        try:
            import torch
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"ignoring invalid HYPERSYNTH_THREADS={threads!r}",
                  file=sys.stderr)
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as e:
        e.show()
        return 2
    except click.Abort:
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except HypersynthError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
