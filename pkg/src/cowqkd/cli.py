"""Command-line interface: ``cowqkd <command> [options]``.

Commands write their primary artifact to the path given by ``--out`` and
send diagnostics to stderr. Exit status is 0 when the artifact was
written, 1 on a data or model error and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from . import curve_fit, data_pipeline as dp, metrics, mlp, synth_data
from .cow_model import CowParameters


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def _int_list(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _name_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _load_frames(paths: Sequence[str]) -> list[dp.FeatureFrame]:
    return [dp.read_frame_csv(p) for p in paths]


def _label(path: str) -> str:
    return Path(path).stem


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.scenario is None:
        scenario = synth_data.Scenario(synth_data.default_scenario())
    else:
        scenario = synth_data.load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    duration = dp.parse_duration(args.duration) if args.duration else scenario.duration
    counts = synth_data.generate_scenario(
        scenario.links, args.out, scenario.start, duration, scenario.sample_period
    )
    print("link,skr,qber,visibility,laserpower")
    for link_id, c in sorted(counts.items()):
        print(f"{link_id},{c['skr']},{c['qber']},{c['visibility']},{c['laserpower']}")
    return 0


def cmd_prep(args) -> int:
    src = Path(args.input)
    link_loss = args.link_loss
    if src.is_dir():
        series = dp.load_link_dir(src)
        meta = src / "link.ini"
        if link_loss is None and meta.exists():
            link_loss = synth_data.read_link_meta(meta)["link_loss"]
    else:
        series = {args.name: dp.ingest_csv(src, args.name)}
    frame, report = dp.prepare(series, window=args.window, lags=args.lags, link_loss=link_loss)
    for rep in report.cleaning:
        print(f"{rep.name}: dropped {rep.nonfinite} non-finite, {rep.out_of_range} out of range", file=sys.stderr)
    print(f"{report.rows} rows", file=sys.stderr)
    dp.write_frame_csv(frame, args.out)
    return 0


def _base_params(args) -> CowParameters:
    if args.params:
        meta = synth_data.read_link_meta(args.params)
        base = meta.get("params") or CowParameters.at_upper_bound(L=meta["distance_km"])
    else:
        if args.distance is None:
            raise CliError("fit needs --params link.ini or --distance KM")
        base = CowParameters.at_upper_bound(L=args.distance)
    if args.mu is not None:
        base = base.replace(mu=args.mu)
    return base


def cmd_fit(args) -> int:
    frame = dp.read_frame_csv(args.frame)
    base = _base_params(args)
    initial = {}
    for item in args.initial or []:
        key, _, value = item.partition("=")
        initial[key.strip()] = float(value)
    spec = curve_fit.FitSpec(tuple(args.free), initial=initial, use_measured_qber=not args.model_qber)
    result = curve_fit.fit(frame, base, spec)
    result.write(args.out, args.residuals)
    if not result.converged:
        print(f"warning: fit did not converge after {result.iterations} iterations", file=sys.stderr)
    print(f"residual_rms = {result.residual_rms!r}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    frames = _load_frames(args.frame)
    topo = mlp.MlpTopology.from_inputs(args.inputs, lags=args.lags)
    cfg = mlp.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    model = mlp.train(mlp.init(topo, args.seed), frames, cfg)
    mlp.save(model, args.model)
    best = model.history[-1]
    print(f"best epoch {best['epoch']}, validation loss {best['val_loss']!r}", file=sys.stderr)
    return 0


def _write_predictions(path: Path, frame: dp.FeatureFrame, pred: np.ndarray, target: str) -> None:
    have = target in frame
    with open(path, "w") as fh:
        fh.write("timestamp,measured,predicted\n" if have else "timestamp,predicted\n")
        for i, ts in enumerate(frame.timestamps):
            head = f"{dp.format_rfc3339(ts)},"
            if have:
                head += f"{float(frame[target][i])!r},"
            fh.write(f"{head}{float(pred[i])!r}\n")


def cmd_predict(args) -> int:
    model = mlp.load(args.model)
    frame = dp.read_frame_csv(args.frame)
    target = model.topology.target
    losses = args.link_loss or [None]
    out = Path(args.out)
    for loss in losses:
        f = frame if loss is None else frame.with_column("link_loss", loss)
        pred = mlp.predict_frame(model, f).values
        path = out if len(losses) == 1 else out.with_name(f"{out.stem}_loss{loss:g}{out.suffix}")
        _write_predictions(path, f, pred, target)
        print(f"wrote {path}", file=sys.stderr)
    return 0


def _read_predictions(path: str) -> tuple[np.ndarray, np.ndarray]:
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    if data.dtype.names is None or not {"measured", "predicted"} <= set(data.dtype.names):
        raise CliError(f"{path}: need measured and predicted columns")
    return np.atleast_1d(data["measured"]).astype(float), np.atleast_1d(data["predicted"]).astype(float)


def cmd_evaluate(args) -> int:
    model = mlp.load(args.model)
    name = args.model_name or _label(args.model)
    rows = []
    for path in args.frame or []:
        frame = dp.read_frame_csv(path)
        if args.rows == "test":
            frame = mlp.split_frame(frame)[1]
        measured = frame[model.topology.target]
        pred_scaled = mlp.predict_scaled(model, frame)
        report = metrics.compute(
            measured, mlp.inverse_target(model, pred_scaled), mlp.scale_target(model, measured), pred_scaled
        )
        rows.append((_label(path), name, report))
    for path in args.predictions or []:
        measured, predicted = _read_predictions(path)
        report = metrics.compute(
            measured, predicted, mlp.scale_target(model, measured), mlp.scale_target(model, predicted)
        )
        rows.append((_label(path), name, report))
    if not rows:
        raise CliError("evaluate needs at least one --frame or --predictions file")
    for link, _, r in rows:
        if r.mre_error:
            print(f"{link}: {r.mre_error}", file=sys.stderr)
    metrics.write_reports(rows, args.out)
    return 0


def cmd_correlate(args) -> int:
    frame = dp.read_frame_csv(args.frame)
    if len(frame) < 2:
        raise CliError(f"{args.frame}: correlation needs at least 2 rows, got {len(frame)}")
    corr = dp.pearson_matrix(frame, args.columns or None)
    text = corr.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cowqkd", description="COW QKD link modeling and SKR prediction.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", help="generate synthetic monitoring data")
    s.add_argument("--scenario", help="scenario INI file (default: the built-in five-link scenario)")
    s.add_argument("--seed", type=int, help="override the noise seed of every link")
    s.add_argument("--duration", help="override the scenario duration, e.g. 2d or 36h")
    s.add_argument("--out", required=True, help="output directory; one link<id>/ subdirectory per link")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prep", help="clean, average, align and lag one link's series into a frame CSV")
    s.add_argument("--in", dest="input", required=True, help="link directory or a single series CSV")
    s.add_argument("--name", default="skr", help="parameter name for a single-file input (default: skr)")
    s.add_argument("--window", default="10m", help="averaging window (default: 10m)")
    s.add_argument("--lags", type=_int_list, default=[1, 2, 3],
                   help="comma-separated SKR lags in windows; empty for none (default: 1,2,3)")
    s.add_argument("--link-loss", type=float, help="constant link_loss column (default: from link.ini)")
    s.add_argument("--out", required=True, help="frame CSV to write")
    s.set_defaults(func=cmd_prep)

    s = sub.add_parser("fit", help="fit model parameters to a frame's SKR")
    s.add_argument("--frame", required=True, help="frame CSV with skr, qber and visibility")
    s.add_argument("--free", type=_name_list, default=["alpha"], help="comma-separated subset of alpha,eta,t_B")
    s.add_argument("--params", help="link.ini whose [params] give the fixed values")
    s.add_argument("--distance", type=float, help="fiber length in km when no --params is given")
    s.add_argument("--mu", type=float, help="override the mean photon number")
    s.add_argument("--initial", action="append", metavar="NAME=VALUE", help="start value of a free parameter")
    s.add_argument("--model-qber", action="store_true", help="use the modeled instead of the measured QBER")
    s.add_argument("--out", required=True, help="fit report (key = value lines)")
    s.add_argument("--residuals", help="CSV of measured, calculated and residual SKR")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("train", help="train the SKR network on one or more frames")
    s.add_argument("--frame", action="append", required=True, help="frame CSV; repeat for multi-link training")
    s.add_argument("--inputs", type=_name_list, default=["qber", "visibility", "link_loss", "history"],
                   help="comma-separated branches from qber,visibility,link_loss,laserpower,history")
    s.add_argument("--lags", type=_int_list, default=[1, 2, 3], help="history lags (default: 1,2,3)")
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--model", required=True, help="model file to write")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="predict SKR for a frame with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--frame", required=True)
    s.add_argument("--link-loss", type=float, action="append",
                   help="replace the link_loss column; repeat for a sweep (one CSV per value)")
    s.add_argument("--out", required=True, help="prediction CSV; with several --link-loss values a suffix is added")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="error metrics of a model, one CSV row per input")
    s.add_argument("--model", required=True, help="model file; its scaler defines the MSE units")
    s.add_argument("--frame", action="append", help="frame CSV to predict and score; repeatable")
    s.add_argument("--predictions", action="append", help="CSV with measured and predicted columns; repeatable")
    s.add_argument("--rows", choices=("all", "test"), default="all",
                   help="score all rows or only the chronological last 20%% (default: all)")
    s.add_argument("--model-name", help="model label in the report (default: model file stem)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("correlate", help="Pearson correlation matrix of a frame")
    s.add_argument("--frame", required=True)
    s.add_argument("--columns", type=_name_list, help="comma-separated subset (default: all)")
    s.add_argument("--out", help="CSV to write (default: stdout)")
    s.set_defaults(func=cmd_correlate)
    return p


_DATA_ERRORS = (
    CliError,
    dp.CsvParseError,
    dp.EmptyInputError,
    dp.ConstantColumnError,
    synth_data.ScenarioError,
    mlp.ModelFileError,
    mlp.ScalerMismatchError,
    mlp.InsufficientDataError,
    ValueError,
    KeyError,
    OSError,
)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.formatwarning = lambda message, *_, **__: f"warning: {message}\n"
    if getattr(args, "scenario", None) is not None and not Path(args.scenario).is_file():
        parser.error(f"scenario file not found: {args.scenario}")
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


def reference_markdown() -> str:
    """Flag reference for every command, rendered from the parser."""
    parser = build_parser()
    parser.formatter_class = argparse.HelpFormatter
    out = ["# cowqkd command reference", "", "Generated from the argument parser.", "",
           "```", parser.format_help().rstrip(), "```", ""]
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub.choices.items():
        out += [f"## {name}", "", "```", sp.format_help().rstrip(), "```", ""]
    return "\n".join(out)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
