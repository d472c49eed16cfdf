"""Command-line entry point: ``n2nus {simulate,train,denoise,eval,snr-profile}``.

Every subcommand accepts ``--config run.json``; command-line flags override
the file. The resolved configuration is written next to the outputs as
``<subcommand>_config.json``. Exit codes: 0 success, 1 invalid arguments or
configuration, 2 I/O failure, 3 numerical failure. Training always starts
from scratch; there is no resume.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from n2nus import io as nio
from n2nus import n2n_train as t
from n2nus import scenes
from n2nus.metrics import average_frames, compare_methods, snr_depth_profile
from n2nus.nn_core import ModelParams, TrainingError, UNetConfig
from n2nus.rf_sim import AttenuationModel, ProbeConfig, envelope, to_bmode

log = logging.getLogger("n2nus")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the key path."""


@dataclass
class SimulationConfig:
    scene: str = "depth"
    media: int = 1
    frames: int = 30
    probe: dict = field(default_factory=dict)
    alpha0_db: float = 0.5
    noise_sigma: Optional[float] = None
    bottom_snr_db: float = 0.0
    noise_rel: float = 0.4
    patch_size: int = 96
    patch_depth: float = 0.03
    tremor_wavelengths: float = 0.0


@dataclass
class TrainingConfig:
    data: list = field(default_factory=list)
    base_channels: int = 16
    depth: int = 5
    batch_size: int = 8
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-2
    pair_mode: str = "ordered"
    split_fraction: float = 0.9
    split_by: str = "pair"
    normalization: str = "global_max_abs"
    save_every_epoch: bool = False


@dataclass
class EvaluationConfig:
    dynamic_range_db: float = 60.0
    domain: str = "bmode"
    average_frames: int = 30


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "."
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)


def _check_type(value, default, path):
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{path}: must not be null")
    if default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number or null, got {value!r}")
        return float(value)
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return value


def _parse_section(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    obj = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        kp = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{kp}: unknown key")
        default = getattr(obj, key)
        if dataclasses.is_dataclass(default):
            value = _parse_section(type(default), value, kp)
        else:
            value = _check_type(value, default, kp)
        setattr(obj, key, value)
    return obj


def parse_config(data: dict) -> RunConfig:
    """Strictly parse a JSON object into a :class:`RunConfig`."""
    cfg = _parse_section(RunConfig, data, "")
    probe_keys = {f.name for f in dataclasses.fields(ProbeConfig)}
    for key in cfg.simulation.probe:
        if key not in probe_keys:
            raise ConfigError(f"simulation.probe.{key}: unknown key")
    if cfg.simulation.scene not in ("depth", "patch"):
        raise ConfigError(f"simulation.scene: expected 'depth' or 'patch', got {cfg.simulation.scene!r}")
    if cfg.simulation.media < 1:
        raise ConfigError("simulation.media: must be >= 1")
    if cfg.simulation.frames < 2:
        raise ConfigError("simulation.frames: must be >= 2")
    if cfg.evaluation.domain not in ("bmode", "rf"):
        raise ConfigError(f"evaluation.domain: expected 'bmode' or 'rf', got {cfg.evaluation.domain!r}")
    if not all(isinstance(p, str) for p in cfg.training.data):
        raise ConfigError("training.data: expected a list of paths")
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: invalid JSON ({exc})") from None
    return parse_config(data)


def _override(cfg: RunConfig, args, mapping):
    """Copy non-None argparse values onto ``cfg`` (dotted target paths)."""
    for attr, target in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        obj = cfg
        *parents, leaf = target.split(".")
        for p in parents:
            obj = getattr(obj, p)
        setattr(obj, leaf, value)
    # re-validate after overrides
    return parse_config(asdict(cfg))


def _prepare_output(cfg: RunConfig, name: str) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    return out


def medium_seed(root: int, index: int) -> int:
    """Seed of medium ``index`` derived from the run's root seed."""
    return int(np.random.SeedSequence([root, index, 2]).generate_state(1)[0])


# -- subcommands -----------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> int:
    sim = cfg.simulation
    probe = ProbeConfig.from_dict({**ProbeConfig().to_dict(), **sim.probe})
    atten = AttenuationModel.from_db(sim.alpha0_db)
    out = _prepare_output(cfg, "simulate")
    setup = None
    if sim.scene == "patch":
        setup = scenes.PatchSetup(probe, atten, sim.patch_depth, sim.patch_size, sim.noise_rel,
                                  sim.noise_sigma)
    snr = []
    for i in range(sim.media):
        seed = medium_seed(cfg.seed, i)
        if setup is not None:
            stack = setup.stack(seed, sim.frames, sim.tremor_wavelengths)
        else:
            stack = scenes.depth_stack(sim.frames, seed, probe, atten, sim.bottom_snr_db, sim.noise_sigma)
        nio.write_stack(out / f"medium{i:04d}.rfc", stack)
        prof = snr_depth_profile(stack).snr_db
        snr.extend(prof[np.isfinite(prof)].tolist())
        sigma = stack.frames[0].noise_sigma
    lo, hi = (min(snr), max(snr)) if snr else (math.nan, math.nan)
    print(f"media {sim.media}  frames {sim.frames}  noise sigma {sigma:.6g}  "
          f"SNR range {lo:.2f} .. {hi:.2f} dB  -> {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    tr = cfg.training
    if not tr.data:
        raise ConfigError("training.data: no input stacks given")
    stacks = []
    for p in tr.data:
        s = nio.read_stack(p)
        if len(s) < 2:
            raise ConfigError(f"{p}: stack has {len(s)} frame(s), need at least 2")
        stacks.append(s)
    config = t.TrainConfig(batch_size=tr.batch_size, epochs=tr.epochs, lr=tr.lr,
                           weight_decay=tr.weight_decay, seed=cfg.seed, pair_mode=tr.pair_mode,
                           normalization=tr.normalization, split_fraction=tr.split_fraction,
                           split_by=tr.split_by)
    net = UNetConfig(base_channels=tr.base_channels, depth=tr.depth)
    shapes = {s.shape for s in stacks}
    if len(shapes) != 1:
        detail = ", ".join(f"{p}: {s.shape}" for p, s in zip(tr.data, stacks))
        raise ConfigError(f"training.data: frame shapes differ ({detail})")
    out = _prepare_output(cfg, "train")
    train_pairs, val_pairs = t.build_dataset(stacks, config)
    data = t.PairData(stacks, config.normalization, net.size_multiple)
    params = ModelParams.initialize(net, seed=cfg.seed)
    print(f"{len(train_pairs)} training / {len(val_pairs)} validation pairs, "
          f"{params.size} parameters")
    ckpt_dir = out / "epochs" if tr.save_every_epoch else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(exist_ok=True)
    best, logbook = t.train(params, data, train_pairs, val_pairs, config, ckpt_dir,
                            on_epoch=lambda r: print(f"epoch {r.epoch:4d}  train {r.train_loss:.6g}  "
                                                     f"val {r.val_loss:.6g}", flush=True))
    nio.save_checkpoint(out / "best.n2n", best)
    (out / "train_log.csv").write_text(logbook.to_csv(), encoding="utf-8")
    print(f"best epoch {best.epoch} (validation loss {best.validation_loss:.6g}) -> {out / 'best.n2n'}")
    return EXIT_OK


def cmd_denoise(cfg: RunConfig, checkpoint: str, input_path: str, frame: int, name: str) -> int:
    ckpt = nio.load_checkpoint(checkpoint)
    stack = nio.read_stack(input_path)
    if not 0 <= frame < len(stack):
        raise ConfigError(f"--frame: index {frame} out of range for {input_path} ({len(stack)} frames)")
    src = stack.frames[frame]
    if src.kind.value != ckpt.kind:
        raise ConfigError(f"{input_path}: holds {src.kind.value} frames, checkpoint expects {ckpt.kind}")
    out = _prepare_output(cfg, "denoise")
    den = t.denoise(ckpt, src)
    if not np.all(np.isfinite(den.samples)):
        raise FloatingPointError("denoised frame contains non-finite values")
    rfc = nio.write_frame(out / name, den, f"{stack.medium_id}:frame{frame}:denoised")
    ref_max = None
    if stack.clean is not None:
        ref_max = float(envelope(stack.clean.samples).max())
    nio.write_pgm(out / f"{name}.pgm", to_bmode(den, cfg.evaluation.dynamic_range_db, ref_max).pixels)
    print(f"denoised frame {frame} of {input_path} -> {rfc}")
    return EXIT_OK


def _first_frame(path: str):
    return nio.read_stack(path).frames[0]


def cmd_eval(cfg: RunConfig, clean: str, noisy: str, denoised: str, averaged: Optional[str],
             noisy_frame: int, name: str) -> int:
    ev = cfg.evaluation
    clean_f = _first_frame(clean)
    noisy_stack = nio.read_stack(noisy)
    if not 0 <= noisy_frame < len(noisy_stack):
        raise ConfigError(f"--noisy-frame: index {noisy_frame} out of range for {noisy}")
    if averaged is not None:
        avg_f = _first_frame(averaged)
    else:
        k = min(ev.average_frames, len(noisy_stack))
        avg_f = average_frames(noisy_stack, k)
    den_f = _first_frame(denoised)
    rep = compare_methods(clean_f, noisy_stack.frames[noisy_frame], avg_f, den_f,
                          ev.dynamic_range_db, ev.domain, noisy_stack.medium_id)
    out = _prepare_output(cfg, "eval")
    (out / f"{name}.csv").write_text(rep.to_csv(), encoding="utf-8")
    (out / f"{name}.txt").write_text(rep.to_text(), encoding="utf-8")
    print(rep.to_text(), end="")
    return EXIT_OK


def cmd_snr_profile(cfg: RunConfig, input_path: str, name: str) -> int:
    stack = nio.read_stack(input_path)
    prof = snr_depth_profile(stack)
    out = _prepare_output(cfg, "snr_profile")
    path = out / f"{name}.csv"
    path.write_text(prof.to_csv(), encoding="utf-8")
    finite = prof.snr_db[np.isfinite(prof.snr_db)]
    if finite.size:
        print(f"{len(prof.snr_db)} depths, SNR {finite.max():.2f} dB (top) .. {finite.min():.2f} dB -> {path}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="n2nus", description="Noise2Noise denoising of ultrasound RF data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", dest="output_dir", help="output directory")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("simulate", help="synthesise noisy RF frame stacks")
    common(s)
    s.add_argument("--scene", choices=("depth", "patch"))
    s.add_argument("--media", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--noise-rel", type=float)
    s.add_argument("--tremor", dest="tremor_wavelengths", type=float,
                   help="inter-frame shift std in carrier wavelengths")
    s.add_argument("--patch-size", type=int)

    s = sub.add_parser("train", help="train a denoiser on noisy stacks")
    common(s)
    s.add_argument("data", nargs="*", help=".rfc stacks (overrides training.data)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--base-channels", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--pair-mode", choices=t.PAIR_MODES)
    s.add_argument("--save-every-epoch", action="store_true", default=None)

    s = sub.add_parser("denoise", help="denoise one frame of a stack")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--name", default="denoised")

    s = sub.add_parser("eval", help="compare noisy, averaged and denoised frames")
    common(s)
    s.add_argument("--clean", required=True, help="clean reference (.clean or .rfc)")
    s.add_argument("--noisy", required=True, help="noisy stack (.rfc)")
    s.add_argument("--denoised", required=True, help="denoised frame (.rfc)")
    s.add_argument("--averaged", help="averaged frame (.rfc); default: mean of the noisy stack")
    s.add_argument("--noisy-frame", type=int, default=0)
    s.add_argument("--average-frames", type=int)
    s.add_argument("--domain", choices=("bmode", "rf"))
    s.add_argument("--name", default="report")

    s = sub.add_parser("snr-profile", help="SNR versus depth of a stack")
    common(s)
    s.add_argument("--input", required=True)
    s.add_argument("--name", default="snr_profile")
    return p


_OVERRIDES = {
    "output_dir": "output_dir", "seed": "seed",
    "scene": "simulation.scene", "media": "simulation.media", "frames": "simulation.frames",
    "noise_sigma": "simulation.noise_sigma", "noise_rel": "simulation.noise_rel",
    "tremor_wavelengths": "simulation.tremor_wavelengths", "patch_size": "simulation.patch_size",
    "epochs": "training.epochs", "batch_size": "training.batch_size", "lr": "training.lr",
    "base_channels": "training.base_channels", "depth": "training.depth",
    "pair_mode": "training.pair_mode", "save_every_epoch": "training.save_every_epoch",
    "average_frames": "evaluation.average_frames", "domain": "evaluation.domain",
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if getattr(args, "data", None):
            args.data = [str(d) for d in args.data]
            cfg.training.data = args.data
        cfg = _override(cfg, args, _OVERRIDES)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "denoise":
            return cmd_denoise(cfg, args.checkpoint, args.input, args.frame, args.name)
        if args.command == "eval":
            return cmd_eval(cfg, args.clean, args.noisy, args.denoised, args.averaged,
                            args.noisy_frame, args.name)
        return cmd_snr_profile(cfg, args.input, args.name)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, nio.FormatError, KeyError) as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
