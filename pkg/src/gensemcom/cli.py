"""Command-line interface: ``gensemcom <command> ...``.

Any option can also be set in a ``key = value`` file passed with
``--config``; command-line flags win over the file.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .channel import ChannelState, bit_budget, capacity
from .codec import unpack_payload
from .gsm import ExtractorConfig, ProfileTable, calibrate_profile_table
from .metric import CSV_HEADER, HvsParams, csv_row, format_key_values, gvif_for_image, \
    image_importance, upsample_mask, mask_psnr
from .optimizer import NoFeasibleProfileError, OptimizerConfig, report_csv, select_profile
from .pipeline import (DatasetOracle, decode_payload, encode_image, gvif_grid, load_dataset,
                       run_snr_sweep, sweep_csv, validate_generation_independence)
from .semantic import ClassModel, build_filter_set
from .synthetic import SceneConfig, make_dataset, write_dataset
from .tensorio import load_ppm, read_key_values, save_ppm

log = logging.getLogger("gensemcom")

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.replace(" ", "").split(",") if v]


def _add_extractor(p):
    p.add_argument("--block-size", type=int, default=8)
    p.add_argument("--scale-window", type=int, default=3)
    p.add_argument("--basis", choices=("dct", "haar"), default="dct")
    p.add_argument("--gain", type=float, default=None, help="feature gain (default: calibrated)")


def _add_channel(p):
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--bandwidth-hz", type=float, default=1e6)
    p.add_argument("--t-max-ms", type=float, default=20.0)


def _add_optimizer(p):
    p.add_argument("--d0-psnr", type=float, default=30.0, help="minimum nominal PSNR (dB)")
    p.add_argument("--penalty", type=float, default=OptimizerConfig.penalty)
    p.add_argument("--step", type=float, default=OptimizerConfig.step)
    p.add_argument("--smoothing", type=float, default=OptimizerConfig.smoothing)
    p.add_argument("--batch-size", type=int, default=OptimizerConfig.batch_size)
    p.add_argument("--max-iters", type=int, default=OptimizerConfig.max_iters)
    p.add_argument("--tol", type=float, default=OptimizerConfig.tol)
    p.add_argument("--alpha-th", type=float, default=OptimizerConfig.alpha_th)
    p.add_argument("--include-mask", action="store_true", help="count mask bits in the rate")


def _add_profiles(p):
    p.add_argument("--profiles", type=Path, default=None, help="profile table (default: bundled)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gensemcom", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a seeded synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--size", type=int, default=128)

    p = sub.add_parser("calibrate-profiles", help="fit the reference gain and profile table")
    p.add_argument("--dataset", type=Path, default=None)
    p.add_argument("--synthetic", type=int, default=16, help="scenes to use without --dataset")
    p.add_argument("--out", type=Path, required=True)
    _add_extractor(p)

    p = sub.add_parser("encode", help="code one image into a GVSC payload")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--profile-id", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--prompt", default="")
    p.add_argument("--include-mask", action="store_true")
    _add_profiles(p)
    _add_extractor(p)

    p = sub.add_parser("decode", help="decode a payload into anchored and completed images")
    p.add_argument("--payload", type=Path, required=True)
    p.add_argument("--out-hat", type=Path, required=True)
    p.add_argument("--out-tilde", type=Path, default=None)

    p = sub.add_parser("gvif", help="GVIF, mask PSNR and rate per image")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--profile-id", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--gamma2", type=float, default=HvsParams.gamma2)
    p.add_argument("--out", type=Path, default=None)
    _add_profiles(p)
    _add_extractor(p)

    p = sub.add_parser("optimize", help="select (profile, alpha) for one channel state")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gamma2", type=float, default=HvsParams.gamma2)
    _add_profiles(p)
    _add_channel(p)
    _add_optimizer(p)
    _add_extractor(p)

    p = sub.add_parser("sweep", help="optimizer-in-the-loop SNR sweep with figures")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--snr-grid", type=_floats, default=_floats("-2,2,6,10,14,18"))
    p.add_argument("--plots", type=Path, default=None, help="directory for PNG figures")
    p.add_argument("--no-baseline", action="store_true")
    p.add_argument("--gamma2", type=float, default=HvsParams.gamma2)
    _add_profiles(p)
    _add_channel(p)
    _add_optimizer(p)
    _add_extractor(p)

    p = sub.add_parser("validate-appendix-a", help="correlation of generated vs true features")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--out", type=Path, default=None)
    _add_extractor(p)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Optional[List[str]]) -> None:
    pre, _ = parser.parse_known_args(argv)
    if pre.config is None:
        return
    values = read_key_values(pre.config)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for target in [parser, *subparsers.choices.values()]:
        known = {a.dest: a for a in target._actions}
        updates = {}
        for key, value in values.items():
            action = known.get(key)
            if action is None:
                continue
            if isinstance(action, argparse._StoreTrueAction):
                if value.lower() not in _BOOL:
                    raise SystemExit(f"config: {key} expects a boolean, got {value!r}")
                updates[key] = _BOOL[value.lower()]
            else:
                updates[key] = action.type(value) if action.type else value
        target.set_defaults(**updates)


def _extractor(args) -> ExtractorConfig:
    kw = dict(block_size=args.block_size, scale_window=args.scale_window, basis=args.basis)
    if args.gain is not None:
        kw["gain"] = args.gain
    return ExtractorConfig(**kw)


def _profiles(args) -> ProfileTable:
    return ProfileTable.load(args.profiles) if args.profiles else ProfileTable.default()


def _optimizer(args) -> OptimizerConfig:
    return OptimizerConfig(penalty=args.penalty, step=args.step, smoothing=args.smoothing,
                           batch_size=args.batch_size, max_iters=args.max_iters, tol=args.tol,
                           alpha_th=args.alpha_th, t_max=args.t_max_ms / 1e3, d0=args.d0_psnr,
                           seed=args.seed)


def _class_model_for(image_path: Path) -> Optional[ClassModel]:
    maps = image_path.with_name(f"{image_path.stem}.cam.gvtf")
    weights = image_path.with_name(f"{image_path.stem}.weights.txt")
    if maps.exists() and weights.exists():
        return ClassModel.load(maps, weights)
    return None


def cmd_gen_synthetic(args) -> int:
    scenes = make_dataset(args.count, args.seed, SceneConfig(size=args.size))
    paths = write_dataset(args.out, scenes)
    print(f"wrote {len(paths)} scenes to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    if args.dataset:
        images = [s.image for s in load_dataset(args.dataset)]
    else:
        images = [s.image for s in make_dataset(args.synthetic, args.seed)]
    gain, table = calibrate_profile_table(images, cfg=_extractor(args))
    table.save(args.out)
    print(f"gain = {gain!r}")
    print(f"wrote {len(table)} profiles to {args.out}")
    return 0


def cmd_encode(args) -> int:
    profile = _profiles(args).by_id(args.profile_id)
    payload = encode_image(load_ppm(args.image), profile, args.alpha, _extractor(args),
                           args.prompt, _class_model_for(args.image), args.include_mask)
    args.out.write_bytes(payload.data)
    print(format_key_values({"payload": str(args.out), "rate_bits": payload.rate_bits,
                             **payload.accounting()}), end="")
    return 0


def cmd_decode(args) -> int:
    result = decode_payload(unpack_payload(args.payload.read_bytes()), seed=args.seed)
    save_ppm(args.out_hat, result.x_hat)
    if args.out_tilde:
        save_ppm(args.out_tilde, result.x_tilde)
    h = result.header
    print(format_key_values({"profile_id": h.profile_id, "alpha": h.alpha,
                             "selected_positions": int(result.filter_set.mask.sum()),
                             "prompt": h.prompt}), end="")
    return 0


def cmd_gvif(args) -> int:
    cfg = _extractor(args)
    hvs = HvsParams(args.gamma2)
    profile = _profiles(args).by_id(args.profile_id)
    lines = [CSV_HEADER]
    for sample in load_dataset(args.dataset):
        report = gvif_for_image(sample.image, profile, args.alpha, cfg, hvs, sample.class_model)
        payload = encode_image(sample.image, profile, args.alpha, cfg,
                               class_model=sample.class_model)
        decoded = decode_payload(payload, seed=args.seed)
        pixels = upsample_mask(decoded.filter_set, cfg.block_size, sample.image.shape[:2])
        mpsnr = mask_psnr(sample.image, decoded.x_hat, pixels) if pixels.any() else None
        lines.append(csv_row(sample.image_id, profile.id, args.alpha, report, mpsnr,
                             payload.rate_bits))
        print(format_key_values({"image_id": sample.image_id, "profile_id": profile.id,
                                 "alpha": args.alpha, **report.to_dict(),
                                 "mask_psnr_db": mpsnr, "rate_bits": payload.rate_bits}))
    if args.out:
        args.out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_optimize(args) -> int:
    oracle = DatasetOracle(load_dataset(args.dataset), _extractor(args), HvsParams(args.gamma2),
                           args.include_mask)
    ch = ChannelState.from_db(args.snr_db, args.bandwidth_hz)
    cfg = _optimizer(args)
    try:
        sel = select_profile(list(_profiles(args)), oracle.eval_oracle(), ch, cfg)
    except NoFeasibleProfileError as exc:
        args.out.write_text(report_csv(exc.outcomes), encoding="utf-8")
        print(f"infeasible: {exc}", file=sys.stderr)
        return 2
    args.out.write_text(report_csv(sel.outcomes), encoding="utf-8")
    print(format_key_values({"profile_id": sel.profile.id, "alpha_star": sel.alpha,
                             "expected_gvif": sel.outcome.expected_gvif,
                             "expected_bits": sel.outcome.expected_bits,
                             "bit_budget": bit_budget(ch, cfg.t_max),
                             "capacity_bps": capacity(ch)}), end="")
    return 0


def cmd_sweep(args) -> int:
    oracle = DatasetOracle(load_dataset(args.dataset), _extractor(args), HvsParams(args.gamma2),
                           args.include_mask)
    profiles = list(_profiles(args))
    rows = run_snr_sweep(oracle, args.snr_grid, profiles, _optimizer(args), args.bandwidth_hz,
                         baseline=not args.no_baseline)
    args.out.write_text(sweep_csv(rows), encoding="utf-8")
    print(sweep_csv(rows), end="")
    if args.plots:
        from .plotting import plot_gvif_grid, plot_sweep
        paths = plot_sweep(rows, args.plots)
        alphas = [0.1, 0.3, 0.5, 0.7]
        grid = gvif_grid(oracle, profiles, alphas)
        paths.append(plot_gvif_grid(grid, [p.nominal_psnr for p in profiles], alphas,
                                    Path(args.plots) / "gvif_vs_profile.png"))
        for path in paths:
            log.info("wrote %s", path)
    return 0


def cmd_validate(args) -> int:
    cfg = _extractor(args)
    samples = load_dataset(args.dataset)
    sample = samples[args.image_index]
    from .gsm import estimate_scale_field, extract_features
    features = extract_features(sample.image, cfg)
    theta = estimate_scale_field(features, cfg.scale_window)
    selection = build_filter_set(image_importance(features, sample.class_model), args.alpha,
                                 features.shape[2])
    report = validate_generation_independence(theta, selection, args.n_samples, args.seed)
    text = format_key_values({"image_id": sample.image_id, "alpha": args.alpha,
                              **report.to_dict()})
    print(text, end="")
    if args.out:
        args.out.write_text(text, encoding="utf-8")
        rows = ["i,j,r"] + [f"{i},{j},{report.correlation_map[i, j]!r}"
                             for i in range(report.correlation_map.shape[0])
                             for j in range(report.correlation_map.shape[1])]
        args.out.with_suffix(".map.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "calibrate-profiles": cmd_calibrate,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "gvif": cmd_gvif,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "validate-appendix-a": cmd_validate,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    _apply_config(parser, argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
