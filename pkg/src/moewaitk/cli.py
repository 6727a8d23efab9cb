"""Command-line entry point: generate, train, sweep, gate-report, dump-experts.

Configuration is an INI-style file of ``key = value`` lines in sections
``[data]``, ``[model]``, ``[train]`` and ``[eval]``. Every command-line flag
overrides the file; ``--show-config`` prints the merged configuration.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import sys
from pathlib import Path

from .checkpoint import (CheckpointConfigError, CheckpointFormatError, load_checkpoint,
                         save_checkpoint)
from .data import DataFormatError, Vocab, generate_task, load_parallel, save_parallel
from .model import ModelConfig
from .policy import format_lagging, parse_lagging
from .report import (dump_expert_outputs, format_expert_dump, format_gate_report, format_rows,
                     gate_report, sweep)
from .training import NumericError, TrainConfig, run_training

log = logging.getLogger("moewaitk")

DEFAULTS = {
    "data": {
        "dir": "data",
        "seed": "1",
        "content_vocab": "32",
        "n_min": "8",
        "n_max": "16",
        "train_size": "20000",
        "valid_size": "1000",
        "test_size": "1000",
        "mix": "0:0.3,2:0.3,4:0.25,6:0.15",
    },
    "model": {
        "num_layers": "2",
        "d_model": "64",
        "num_heads": "4",
        "d_ff": "128",
        "expert_lagging": "1,6,11,16",
        "max_seq_len": "32",
        "dropout": "0.1",
    },
    "train": {
        "system": "moe_two_stage",
        "k_train": "",
        "total_updates": "4000",
        "stage1_fraction": "0.7",
        "batch_size": "64",
        "lr": "5e-4",
        "warmup": "400",
        "beta1": "0.9",
        "beta2": "0.98",
        "eps": "1e-9",
        "clip_norm": "1.0",
        "seed": "1",
        "label_smoothing": "0.1",
        "eval_every": "500",
        "val_size": "500",
        "checkpoint": "runs/model.ckpt",
        "log": "runs/train.log",
        "stage1_checkpoint": "",
        "resume": "",
    },
    "eval": {
        "k_test": "1,3,5,7,inf",
        "noise": "0",
        "noise_seed": "0",
        "split": "level",
        "workers": "1",
        "samples": "200",
        "layer": "-1",
        "out": "",
    },
}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def load_config(path=None):
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
    for section, keys in cp.items():
        if section == "DEFAULT":
            continue
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in keys:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    return cp


def show_config(cp):
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _lags(text):
    return [parse_lagging(x) for x in str(text).split(",") if x.strip()]


def _floats(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


def _mix(text):
    out = {}
    for item in text.split(","):
        d, _, w = item.partition(":")
        out[int(d)] = float(w)
    return out


def model_config(cp, vocab_size):
    m = cp["model"]
    return ModelConfig(
        num_layers=m.getint("num_layers"), d_model=m.getint("d_model"),
        num_heads=m.getint("num_heads"), d_ff=m.getint("d_ff"),
        src_vocab=vocab_size, tgt_vocab=vocab_size,
        expert_lagging=_lags(m["expert_lagging"]), max_seq_len=m.getint("max_seq_len"),
        dropout=m.getfloat("dropout"))


def train_config(cp):
    t = cp["train"]
    return TrainConfig(
        system=t["system"], k_train=parse_lagging(t["k_train"]) if t["k_train"] else None,
        total_updates=t.getint("total_updates"), stage1_fraction=t.getfloat("stage1_fraction"),
        batch_size=t.getint("batch_size"), lr=t.getfloat("lr"), warmup=t.getint("warmup"),
        betas=(t.getfloat("beta1"), t.getfloat("beta2")), eps=t.getfloat("eps"),
        clip_norm=t.getfloat("clip_norm"), seed=t.getint("seed"),
        label_smoothing=t.getfloat("label_smoothing"), eval_every=t.getint("eval_every"),
        val_size=t.getint("val_size"))


def load_split(data_dir, split, vocab):
    d = Path(data_dir)
    return load_parallel(d / f"{split}.src", d / f"{split}.tgt", vocab)


# commands -------------------------------------------------------------------

def cmd_generate(cp):
    dcfg = cp["data"]
    out = Path(dcfg["dir"])
    sizes = {s: dcfg.getint(f"{s}_size") for s in ("train", "valid", "test")}
    if min(sizes.values()) < 1:
        raise DataFormatError(f"empty corpus requested: {sizes}")
    vocab = Vocab.build(dcfg.getint("content_vocab"))
    mix = _mix(dcfg["mix"])
    length = (dcfg.getint("n_min"), dcfg.getint("n_max"))
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    seed = dcfg.getint("seed")
    for i, (split, size) in enumerate(sizes.items()):
        pairs = generate_task([seed, i], size, vocab, length, mix)
        save_parallel(pairs, out / f"{split}.src", out / f"{split}.tgt", vocab)
        log.info("wrote %d %s pairs to %s", size, split, out)
    return 0


def cmd_train(cp):
    tcfg = train_config(cp)
    data_dir = cp["data"]["dir"]
    vocab = Vocab.load(Path(data_dir) / "vocab.txt")
    train = load_split(data_dir, "train", vocab)
    valid = load_split(data_dir, "valid", vocab)
    mcfg = model_config(cp, len(vocab))
    t = cp["train"]
    resume = load_checkpoint(t["resume"]) if t["resume"] else None
    lines = []
    if resume is not None and Path(t["log"]).exists():
        lines = Path(t["log"]).read_text().splitlines()[1:]
        upto = int(resume.meta.get("update", 0))
        lines = [ln for ln in lines if int(ln.split("\t")[0]) <= upto]

    def stage1_done(model):
        if t["stage1_checkpoint"]:
            _ensure_parent(t["stage1_checkpoint"])
            save_checkpoint(model, t["stage1_checkpoint"])
            log.info("stage-1 checkpoint written to %s", t["stage1_checkpoint"])

    try:
        model, lines = run_training(tcfg, mcfg, train, valid, resume=resume,
                                    on_stage1_end=stage1_done, log_lines=lines)
    finally:
        _ensure_parent(t["log"])
        Path(t["log"]).write_text("update\tloss\tval_loss\tk_sampled\tstage\n"
                                  + "".join(ln + "\n" for ln in lines))
    _ensure_parent(t["checkpoint"])
    save_checkpoint(model, t["checkpoint"])
    log.info("checkpoint (stage %s) written to %s", model.stage, t["checkpoint"])
    return 0


def _checkpoints(args):
    if not args.checkpoint:
        raise ConfigError("at least one --checkpoint is required")
    models = []
    for path in args.checkpoint:
        models.append(load_checkpoint(path))
    return models


def _write(text, out):
    if out:
        _ensure_parent(out)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_sweep(cp, args):
    e = cp["eval"]
    checkpoints = _checkpoints(args)
    data_dir = cp["data"]["dir"]
    vocab = Vocab.load(Path(data_dir) / "vocab.txt")
    test = load_split(data_dir, "test", vocab)
    models = checkpoints
    if args.system:
        have = {m.meta.get("system") for m in models}
        for name in args.system:
            if name not in have:
                raise ConfigError(f"no checkpoint for requested system {name!r} (have {sorted(have)})")
        models = [m for m in models if m.meta.get("system") in args.system]
    rows = sweep(models, test, _lags(e["k_test"]), _floats(e["noise"]), vocab, e["split"],
                 e.getint("noise_seed"), e.getint("workers"))
    _write(format_rows(rows), e["out"])
    return 0


def cmd_gate_report(cp, args):
    e = cp["eval"]
    checkpoints = _checkpoints(args)
    data_dir = cp["data"]["dir"]
    vocab = Vocab.load(Path(data_dir) / "vocab.txt")
    test = load_split(data_dir, "test", vocab)
    model = checkpoints[0]
    rows, uniform = gate_report(model, test, _lags(e["k_test"]))
    if uniform:
        log.warning("checkpoint mixes experts with equal weights; gate report is uniform")
    _write(format_gate_report(rows, model.config.expert_lagging), e["out"])
    return 0


def cmd_dump_experts(cp, args):
    e = cp["eval"]
    checkpoints = _checkpoints(args)
    data_dir = cp["data"]["dir"]
    vocab = Vocab.load(Path(data_dir) / "vocab.txt")
    test = load_split(data_dir, "test", vocab)
    model = checkpoints[0]
    ks = _lags(e["k_test"])
    if len(ks) != 1:
        raise ConfigError("dump-experts takes exactly one --k-test value")
    rows = dump_expert_outputs(model, test, ks[0], e.getint("samples"), e.getint("layer"))
    _write(format_expert_dump(rows, model.config.d_model), e["out"])
    return 0


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def build_parser():
    p = _Parser(prog="moewaitk", description=__doc__.split("\n\n")[0])
    p.add_argument("command", nargs="?", choices=["generate", "train", "sweep", "gate-report", "dump-experts"])
    p.add_argument("--config", help="INI config file")
    p.add_argument("--show-config", action="store_true", help="print the merged configuration and exit")
    p.add_argument("--seed", type=int, help="data seed for generate, training seed for train")
    p.add_argument("--data-dir")
    p.add_argument("--system", action="append", help="training system, or systems required by sweep")
    p.add_argument("--k-train")
    p.add_argument("--updates", type=int)
    p.add_argument("--stage1-fraction", type=float)
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--stage1-checkpoint", help="where to save the model when stage 1 ends")
    p.add_argument("--log", help="training log path")
    p.add_argument("--checkpoint", action="append", help="checkpoint path (repeatable)")
    p.add_argument("--k-test", help="comma-separated test laggings, 'inf' for offline")
    p.add_argument("--noise", help="comma-separated last-token noise proportions")
    p.add_argument("--split", choices=["none", "level", "displacement"])
    p.add_argument("--samples", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output path")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def apply_overrides(cp, args):
    def put(section, key, value):
        if value is not None:
            cp[section][key] = str(value)

    cmd = args.command
    put("data", "dir", args.data_dir)
    if args.seed is not None:
        put("data" if cmd == "generate" else "train", "seed", args.seed)
    if cmd == "train":
        if args.system:
            if len(args.system) != 1:
                raise ConfigError("train takes a single --system")
            put("train", "system", args.system[0])
        put("train", "checkpoint", args.out or (args.checkpoint[0] if args.checkpoint else None))
    put("train", "k_train", args.k_train)
    put("train", "total_updates", args.updates)
    put("train", "stage1_fraction", args.stage1_fraction)
    put("train", "resume", args.resume)
    put("train", "stage1_checkpoint", args.stage1_checkpoint)
    put("train", "log", args.log)
    put("eval", "k_test", args.k_test)
    put("eval", "noise", args.noise)
    put("eval", "split", args.split)
    put("eval", "samples", args.samples)
    put("eval", "workers", args.workers)
    if cmd in ("sweep", "gate-report", "dump-experts"):
        put("eval", "out", args.out)
    if cmd == "generate":
        put("data", "dir", args.out if args.data_dir is None else None)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cp = load_config(args.config)
        apply_overrides(cp, args)
        if args.show_config:
            sys.stdout.write(show_config(cp))
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        if args.command == "generate":
            return cmd_generate(cp)
        if args.command == "train":
            return cmd_train(cp)
        if args.command == "sweep":
            return cmd_sweep(cp, args)
        if args.command == "gate-report":
            return cmd_gate_report(cp, args)
        return cmd_dump_experts(cp, args)
    except (ConfigError, CheckpointConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        if isinstance(exc, (DataFormatError, CheckpointFormatError)):
            print(f"data error: {exc}", file=sys.stderr)
            return 2
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
