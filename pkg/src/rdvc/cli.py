"""Command line entry points.

Subcommands: train, finetune, encode, decode, eval, rd-curve, self-test.

Settings come from an optional ``--config`` file of ``section.key = value``
lines (sections ``model``, ``train`` and ``data``), overridden by flags.
Unknown keys are rejected and the resolved configuration is logged.  On
failure a single ``rdvc: error: <category>: <message>`` line is printed to
stderr and the exit code is 1; bad flags exit with 2.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields

import torch

from . import selftest
from .autoencoder import AutoencoderConfig
from .codec import CodecError, EncodedVideo, decode_video, encode_video
from .codemodel import PriorConfig
from .dataio import DataError, load_dataset, load_frames, write_frames
from .estimator import AE_MODES, PRIORS
from .evalharness import rd_curve, rd_point, write_csv
from .model import CheckpointError, ModelConfig, load_checkpoint
from .trainer import TrainConfig, TrainingDiverged, finetune, train

log = logging.getLogger("rdvc")

MODEL_KEYS = {
    "ae": "3d", "prior": "frame", "input_channels": 3, "latent_channels": 32, "hidden_channels": 128,
    "first_channels": 64, "residual_blocks": 5, "codebook_size": 8, "hidden_per_group": 8,
    "gru_channels": 64, "layers": 4, "kernel": 5,
}
TRAIN_KEYS = {
    f.name: f.default for f in fields(TrainConfig)
    if f.name not in ("frozen", "metrics_path", "checkpoint_dir")
}
DATA_KEYS = {"crop": "center", "crop_size": 160, "downscale": None, "chunk_T": 8}
SECTIONS = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "data": DATA_KEYS}


class ConfigError(ValueError):
    pass


def _coerce(value, default, key):
    if isinstance(default, str):
        return value
    if value.lower() in ("none", "null", ""):
        return None
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float) or default is None:
            return float(value) if "." in value or "e" in value.lower() else int(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def default_config():
    return {s: dict(keys) for s, keys in SECTIONS.items()}


def read_config(path, config=None):
    """Merge a ``section.key = value`` file into ``config``."""
    config = config or default_config()
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected section.key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            section, _, name = key.partition(".")
            if section not in SECTIONS or name not in SECTIONS[section]:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            config[section][name] = _coerce(value, SECTIONS[section][name], key)
    return config


def model_config(m):
    if m["ae"] not in AE_MODES:
        raise ConfigError(f"model.ae must be one of {sorted(AE_MODES)}")
    if m["prior"] not in PRIORS:
        raise ConfigError(f"model.prior must be one of {sorted(PRIORS)}")
    return ModelConfig(
        AutoencoderConfig(
            mode=AE_MODES[m["ae"]], input_channels=m["input_channels"], latent_channels=m["latent_channels"],
            hidden_channels=m["hidden_channels"], first_channels=m["first_channels"],
            residual_blocks=m["residual_blocks"],
        ),
        PriorConfig(
            variant=PRIORS[m["prior"]], layers=m["layers"], kernel=m["kernel"],
            hidden_per_group=m["hidden_per_group"], latent_channels=m["latent_channels"],
            codebook_size=m["codebook_size"], gru_channels=m["gru_channels"],
        ),
    )


def _resolve(args):
    config = read_config(args.config) if getattr(args, "config", None) else default_config()
    overrides = {
        ("model", "ae"): getattr(args, "ae", None),
        ("model", "prior"): getattr(args, "prior", None),
        ("train", "beta"): getattr(args, "beta", None),
        ("train", "alpha"): getattr(args, "alpha", None),
        ("train", "seed"): getattr(args, "seed", None),
    }
    for (section, key), value in overrides.items():
        if value is not None:
            config[section][key] = value
    if getattr(args, "masks", None):
        config["train"]["semantic"] = True
    flat = " ".join(f"{s}.{k}={v}" for s in sorted(config) for k, v in sorted(config[s].items()))
    log.info("resolved config: %s", flat)
    return config


def _data_root(args):
    root = args.data or os.environ.get("NVC_DATA_DIR")
    if not root:
        raise DataError("no dataset given (use --data or set NVC_DATA_DIR)")
    return root


def _load_data(args, config, with_masks=False):
    d = config["data"]
    masks = args.masks if with_masks else None
    return load_dataset(_data_root(args), masks, d["crop"], d["crop_size"], d["downscale"], d["chunk_T"],
                        config["train"]["seed"])


def _train_config(config, out):
    t = dict(config["train"])
    return TrainConfig(**t, metrics_path=os.path.join(out, "metrics.csv"), checkpoint_dir=out)


def cmd_train(args):
    config = _resolve(args)
    torch.manual_seed(config["train"]["seed"])
    data = _load_data(args, config, with_masks=bool(args.masks))
    masks = None
    if args.masks:
        data, masks = data
    result = train(model_config(config["model"]), data, _train_config(config, args.out), masks=masks)
    print(f"trained {result.steps} steps; checkpoint {result.checkpoint}")


def cmd_finetune(args):
    config = _resolve(args)
    data = _load_data(args, config, with_masks=bool(args.masks))
    masks = None
    if args.masks:
        data, masks = data
    result = finetune(args.model, data, _train_config(config, args.out), masks=masks)
    print(f"fine-tuned {result.steps} steps; checkpoint {result.checkpoint}")


def cmd_encode(args):
    model, _ = load_checkpoint(args.model)
    frames = load_frames(args.inp)
    d = _resolve(args)["data"]
    data = encode_video(frames, model, chunk_T=d["chunk_T"]).to_bytes()
    with open(args.out, "wb") as f:
        f.write(data)
    print(f"wrote {len(data)} bytes for {len(frames)} frames to {args.out}")


def cmd_decode(args):
    model, _ = load_checkpoint(args.model)
    with open(args.inp, "rb") as f:
        encoded = EncodedVideo.from_bytes(f.read())
    frames = decode_video(encoded, model)
    write_frames(frames, args.out)
    print(f"decoded {len(frames)} frames to {args.out}")


def _beta_of(manifest):
    return manifest.get("extra", {}).get("train", {}).get("beta")


def cmd_eval(args):
    config = _resolve(args)
    model, manifest = load_checkpoint(args.model)
    data = _load_data(args, config, with_masks=bool(args.masks))
    masks = None
    if args.masks:
        data, masks = data
    point = rd_point(model, data, os.path.basename(os.path.normpath(args.model)), _beta_of(manifest),
                     os.path.basename(os.path.normpath(_data_root(args))), masks,
                     scales=config["train"]["ms_ssim_scales"])
    text = write_csv([point], args.out)
    sys.stdout.write(text)


def cmd_rd_curve(args):
    config = _resolve(args)
    paths = [p for p in args.models.split(",") if p]
    models = []
    for p in paths:
        model, manifest = load_checkpoint(p)
        models.append((os.path.basename(os.path.normpath(p)), model, _beta_of(manifest)))
    data = _load_data(args, config)
    points = rd_curve(models, data, os.path.basename(os.path.normpath(_data_root(args))), args.out,
                      scales=config["train"]["ms_ssim_scales"])
    sys.stdout.write(write_csv(points))


def cmd_self_test(args):
    passed, failed = selftest.run()
    print(f"self-test: {passed} passed, {failed} failed")
    return 0 if failed == 0 else 1


def build_parser():
    p = argparse.ArgumentParser(prog="rdvc", description="Learned video codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=False, data=False, out=False, inp=False):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)
        if model:
            sp.add_argument("--model", required=True)
        if inp:
            sp.add_argument("--in", dest="inp", required=True)
        if data:
            sp.add_argument("--data")
            sp.add_argument("--masks")
        if out:
            sp.add_argument("--out", required=True)

    def training(sp):
        sp.add_argument("--beta", type=float)
        sp.add_argument("--prior", choices=sorted(PRIORS))
        sp.add_argument("--ae", choices=sorted(AE_MODES))
        sp.add_argument("--alpha", type=float)

    sp = sub.add_parser("train", help="train a model from scratch")
    common(sp, data=True, out=True)
    training(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="continue training a checkpoint on new data")
    common(sp, model=True, data=True, out=True)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--alpha", type=float)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("encode", help="compress frames to a .nvc file")
    common(sp, model=True, inp=True, out=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="decompress a .nvc file to frames")
    common(sp, model=True, inp=True, out=True)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="rate-distortion point of one model")
    common(sp, model=True, data=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("rd-curve", help="RD points of several models as CSV")
    common(sp, data=True)
    sp.add_argument("--models", required=True, help="comma-separated checkpoint paths")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_rd_curve)

    sp = sub.add_parser("self-test", help="run the invariant suite")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_self_test)
    return p


_CATEGORIES = (
    (ConfigError, "config"),
    (DataError, "data"),
    (CheckpointError, "checkpoint"),
    (CodecError, "codec"),
    (TrainingDiverged, "training"),
    (OSError, "io"),
    (ValueError, "invalid"),
)


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    torch.set_num_threads(args.threads)
    try:
        code = args.func(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes one error line
        category = next((c for t, c in _CATEGORIES if isinstance(e, t)), "internal")
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"rdvc: error: {category}: {msg}", file=sys.stderr)
        return 1
    return code or 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
