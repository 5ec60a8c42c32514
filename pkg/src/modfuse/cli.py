"""``modfuse`` command line: synth, pretrain, finetune, report.

Exit codes: 0 success, 2 configuration or usage error, 3 data or I/O error,
4 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import report
from .config import RunConfig, resolve_seed
from .data import MAX_SUBJECTS, generate_synthetic, load_dataset, subject_split
from .encoders import MODALITIES
from .errors import ConfigError, DataError, DivergenceError, ModfuseError, UsageError
from .training import Checkpoint, finetune_fusion, pretrain_modality

log = logging.getLogger("modfuse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
METRICS_FILE = "metrics.csv"
SPLIT_KEYS = ("seed", "test_fraction", "repeat")


class _HelpFormatter(argparse.HelpFormatter):
    """Every option ends its help with ``(default: X)`` or ``(required)``."""

    def __init__(self, prog):
        super().__init__(prog, max_help_position=32, width=100)

    def _get_help_string(self, action):
        text = action.help or ""
        if action.option_strings and "(default:" not in text and action.dest != "help":
            text += " (required)" if action.required else " (default: %(default)s)"
        return text


def _check_subject(k: int) -> int:
    if not 1 <= k <= MAX_SUBJECTS:
        raise UsageError(f"subject out of range 1..{MAX_SUBJECTS}")
    return k


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)


def _out_dir(args, cfg: RunConfig, *parts: str) -> Path:
    return Path(args.out) if args.out else Path(str(cfg["paths.out"])).joinpath(*parts)


def _load_subject(args, cfg: RunConfig, subject: int):
    data = args.data or str(cfg["paths.data"])
    trials = load_dataset(data, subject=subject, expected_shapes=cfg.expected_shapes())
    if not trials:
        raise DataError(f"no trials for subject {subject} in {data}")
    return trials


def _split(trials, cfg: RunConfig, subject: int, all_modalities: bool):
    train = cfg.train()
    return subject_split(trials, train.test_fraction, train.seed, all_modalities, train.repeat)[subject]


def _finish(ckpt: Checkpoint, out: Path, subject: int, condition: str) -> str:
    ckpt.save(out)
    line = report.metrics_line(subject, condition, ckpt.metrics["train_acc"], ckpt.metrics.get("val_acc"))
    (out / METRICS_FILE).write_text(f"{report.METRICS_HEADER}\n{line}\n")
    return line


def cmd_synth(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.set("synth.seed", resolve_seed(args.seed, cfg, "synth.seed"))
    out = Path(args.out or str(cfg["paths.data"]))
    manifest = generate_synthetic(cfg.synth(), out)
    print(f"wrote {len(manifest.records)} trials to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    subject = _check_subject(args.subject)
    cfg = RunConfig.load(args.config)
    cfg.set("train.seed", resolve_seed(args.seed, cfg, "train.seed"))
    modality = args.modality
    split = _split(_load_subject(args, cfg, subject), cfg, subject, all_modalities=modality == "audio")
    ckpt = pretrain_modality(split.train, split.test, modality, cfg.encoder(modality), cfg.train())
    ckpt.subject, ckpt.echo = subject, cfg.echo()
    print(_finish(ckpt, _out_dir(args, cfg, f"sub{subject:02d}", modality), subject, modality))
    return EXIT_OK


def _encoder_dirs(spec: str) -> dict[str, Path]:
    parts = [p.strip() for p in spec.split(",")]
    parts += [""] * (len(MODALITIES) - len(parts))
    if len(parts) > len(MODALITIES):
        raise UsageError(f"--encoders takes {len(MODALITIES)} directories (vision,audio,eeg), got {len(parts)}")
    dirs = {}
    for m, p in zip(MODALITIES, parts):
        if not p:
            raise UsageError(f"missing {m} encoder checkpoint in --encoders")
        if not Path(p).is_dir():
            raise UsageError(f"{m} encoder checkpoint not found: {p}")
        dirs[m] = Path(p)
    return dirs


def _check_encoder(m: str, ckpt: Checkpoint, subject: int, cfg: RunConfig) -> None:
    if ckpt.kind != "pretrain" or ckpt.modality != m:
        raise ConfigError(f"{m} slot of --encoders holds a {ckpt.modality or ckpt.kind} checkpoint")
    if ckpt.subject is not None and ckpt.subject != subject:
        raise ConfigError(f"{m} encoder was trained on subject {ckpt.subject}, not {subject}")
    train = cfg.train()
    for key in SPLIT_KEYS:
        if getattr(ckpt.train, key) != getattr(train, key):
            # a different split would leak the encoder's training trials into validation
            raise ConfigError(
                f"{m} encoder used train.{key} = {getattr(ckpt.train, key)}, this run uses {getattr(train, key)}"
            )


def cmd_finetune(args) -> int:
    subject = _check_subject(args.subject)
    dirs = _encoder_dirs(args.encoders)
    cfg = RunConfig.load(args.config)
    cfg.set("train.seed", resolve_seed(args.seed, cfg, "train.seed"))
    encoders = {m: Checkpoint.load(d) for m, d in dirs.items()}
    for m, ckpt in encoders.items():
        _check_encoder(m, ckpt, subject, cfg)
    split = _split(_load_subject(args, cfg, subject), cfg, subject, all_modalities=True)
    ckpt = finetune_fusion(split.train, split.test, encoders, cfg.fusion(), cfg.train())
    ckpt.subject, ckpt.echo = subject, cfg.echo()
    print(_finish(ckpt, _out_dir(args, cfg, f"sub{subject:02d}", "multimodal"), subject, "multimodal"))
    return EXIT_OK


def cmd_report(args) -> int:
    sources = []
    for path in args.metrics:
        try:
            sources.append((path, Path(path).read_text()))
        except OSError as exc:
            raise DataError(f"cannot read metrics file {path}: {exc.strerror}") from exc
    table = report.aggregate(report.parse_metrics(sources))
    if args.format == "barplot":
        text = report.emit_barplot_data(table)
    else:
        text = report.emit_table(table, args.format)
    _write(args.out, text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modfuse",
        description="Tri-modal (vision, audio, EEG) transformer fusion for emotion recognition.",
        formatter_class=_HelpFormatter,
    )
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING"], help="logging level")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_HelpFormatter)
        p.set_defaults(func=func)
        return p

    def common(p, seed_key):
        p.add_argument("--config", metavar="PATH", help="run configuration file (default: built-in defaults)")
        p.add_argument(
            "--seed", type=int, metavar="N", help=f"seed; overrides {seed_key} and $MODFUSE_SEED (default: {seed_key})"
        )

    p = command("synth", cmd_synth, "generate a synthetic tri-modal dataset")
    common(p, "synth.seed")
    p.add_argument("--out", metavar="DIR", help="dataset directory (default: paths.data)")

    p = command("pretrain", cmd_pretrain, "pretrain one modality encoder on one subject")
    p.add_argument("--modality", required=True, choices=MODALITIES, help="modality to pretrain")
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: paths.data)")
    p.add_argument("--subject", required=True, type=int, metavar="K", help=f"subject id, 1..{MAX_SUBJECTS}")
    common(p, "train.seed")
    p.add_argument("--out", metavar="DIR", help="checkpoint directory (default: paths.out/subKK/MODALITY)")

    p = command("finetune", cmd_finetune, "train the fusion head on frozen encoders")
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: paths.data)")
    p.add_argument("--subject", required=True, type=int, metavar="K", help=f"subject id, 1..{MAX_SUBJECTS}")
    p.add_argument(
        "--encoders", required=True, metavar="DIR,DIR,DIR", help="vision,audio,eeg pretrain checkpoint directories"
    )
    common(p, "train.seed")
    p.add_argument("--out", metavar="DIR", help="checkpoint directory (default: paths.out/subKK/multimodal)")

    p = command("report", cmd_report, "aggregate metrics files into a subject-wise table")
    p.add_argument("--metrics", required=True, nargs="+", metavar="FILE", help="metrics CSV files")
    p.add_argument("--format", default="csv", choices=["csv", "markdown", "barplot"], help="output format")
    p.add_argument("--out", metavar="PATH", help="output file (default: standard output)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        code, exc_text = EXIT_CONFIG, str(exc)
    except DivergenceError as exc:
        code, exc_text = EXIT_DIVERGED, f"training diverged: {exc}"
    except (ModfuseError, OSError) as exc:
        code, exc_text = EXIT_DATA, str(exc)
    print(f"modfuse {args.command}: error: {exc_text}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
