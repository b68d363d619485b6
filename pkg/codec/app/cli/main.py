"""Command-line frontend: train, encode, decode, eval, bdmetrics and split."""
import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import structlog

from app.cli.error_handler import handle_exception
from app.core.config import LAMBDA_GRID, Settings, get_settings
from app.core.exceptions import ConfigError
from app.core.logging import configure_logging
from app.services.checkpoint import load_checkpoint
from app.services.codec import PointCloudCodec
from app.services.dataset import PointCloudDataset, load_raw, write_split_lists
from app.services.evaluation import bd_psnr, bd_rate, evaluate_codec, rd_points, read_rd_csv
from app.services.ply import load_pointcloud, save_pointcloud
from app.services.training import train, train_sweep

logger = structlog.get_logger(__name__)

PROG = "dpcc"


def _settings(args: argparse.Namespace) -> Settings:
    return get_settings(str(args.config) if args.config else None)


def _device(args: argparse.Namespace, settings: Settings) -> str:
    return args.device or settings.device


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}", details={"path": str(path)})


def cmd_train(args: argparse.Namespace) -> int:
    settings = _settings(args)
    model_cfg = settings.codec_model()
    train_cfg = settings.training()
    dataset = PointCloudDataset(args.data, split=train_cfg.data_split, seed=settings.seed)
    options = dict(
        seed=settings.seed, out_dir=args.out, device=_device(args, settings), progress=args.progress
    )
    if args.sweep or args.lambdas:
        lambdas = tuple(args.lambdas) if args.lambdas else LAMBDA_GRID
        results = train_sweep(dataset, model_cfg, train_cfg, lambdas=lambdas, **options)
        checkpoints = [path for result in results.values() for path in result.checkpoints]
    else:
        checkpoints = train(dataset, model_cfg, train_cfg, **options).checkpoints
    for path in checkpoints:
        print(path)
    return 0


def cmd_encode(args: argparse.Namespace) -> int:
    settings = _settings(args)
    _require_file(args.model, "Checkpoint")
    expected = settings.codec_model() if args.config else None
    model, _ = load_checkpoint(args.model, expected=expected)
    codec = PointCloudCodec(model, device=_device(args, settings))

    pc = load_pointcloud(args.input)
    encoded = codec.encode(pc, seed=args.seed, label=args.label)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    args.output.write_bytes(encoded.data)

    summary = encoded.summary
    streams = " ".join(f"{name}={bits}" for name, bits in summary.stream_bits.items())
    print(f"N={summary.N} bytes={summary.bytes} bpp={summary.bpp!r} bits: {streams}")
    return 0


def cmd_decode(args: argparse.Namespace) -> int:
    settings = _settings(args)
    _require_file(args.model, "Checkpoint")
    _require_file(args.input, "Container")
    expected = settings.codec_model() if args.config else None
    model, _ = load_checkpoint(args.model, expected=expected)
    codec = PointCloudCodec(model, device=_device(args, settings))

    pc = codec.decode(args.input.read_bytes())
    save_pointcloud(pc, args.output)
    print(f"N={pc.num_points} output={args.output}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    settings = _settings(args)
    expected = settings.codec_model() if args.config else None
    raw = load_raw(args.data, split=args.split, seed=settings.seed)
    clouds = [(str(path), pc) for path, pc in raw]
    rows = evaluate_codec(
        args.models,
        clouds,
        args.out,
        expected=expected,
        seed=args.seed,
        samples=args.samples,
        peak=settings.psnr_peak,
        denormalized=args.denormalized,
        num_points=args.points,
        device=_device(args, settings),
    )
    for row in rows:
        print(
            f"lambda={row.lambda_!r} bpp={row.bpp:.4f} "
            f"psnr_d1={row.psnr_d1:.3f} chamfer={row.chamfer:.6g}"
        )
    return 0


def _clean(value: float, digits: int) -> float:
    # drops the sign of values that round to zero
    return round(value, digits) + 0.0


def cmd_bdmetrics(args: argparse.Namespace) -> int:
    anchor = rd_points(read_rd_csv(args.anchor))
    test = rd_points(read_rd_csv(args.test))
    print(f"BD-PSNR: {_clean(bd_psnr(anchor, test), 3):.3f} dB")
    print(f"BD-Rate: {_clean(bd_rate(anchor, test), 2):.2f} %")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    settings = _settings(args)
    seed = settings.seed if args.seed is None else args.seed
    for name, path in write_split_lists(args.data, args.out, seed=seed).items():
        print(f"{name}: {path}")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "bdmetrics": cmd_bdmetrics,
    "split": cmd_split,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Diffusion-based point cloud codec")
    parser.add_argument("--config", type=Path, default=None, help="flat key = value config file")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--log-json", action="store_true", help="emit JSON log lines")
    parser.add_argument("--device", default=None, help="torch device, e.g. cpu or cuda:0")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model for the configured lambda")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--progress", action="store_true", help="show a progress bar")
    p.add_argument(
        "--sweep", action="store_true", help="train one model per lambda of the default RD grid"
    )
    p.add_argument(
        "--lambdas", type=float, nargs="+", default=None, help="train one model per given lambda"
    )

    p = sub.add_parser("encode", help="compress a PLY cloud into a .dpcc container")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", type=int, default=None)

    p = sub.add_parser("decode", help="reconstruct a PLY cloud from a .dpcc container")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("eval", help="RD evaluation of one checkpoint per lambda")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--models", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=1, help="decoder samples averaged per cloud")
    p.add_argument("--points", type=int, default=None, help="subsample clouds to this many points")
    p.add_argument(
        "--denormalized",
        action="store_true",
        help="measure in original coordinates with the bounding diagonal as peak",
    )

    p = sub.add_parser("bdmetrics", help="BD-PSNR and BD-Rate of --test against --anchor")
    p.add_argument("--anchor", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)

    p = sub.add_parser("split", help="write the 8:1:1 train/val/test file lists")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, json_logs=args.log_json)
    log = logger.bind(command=args.command)
    try:
        log.debug("command_started")
        code = COMMANDS[args.command](args)
        log.debug("command_finished")
        return code
    except (Exception, KeyboardInterrupt) as exc:
        return handle_exception(exc)


if __name__ == "__main__":
    sys.exit(main())
