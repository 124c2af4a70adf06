"""Command-line entry points: `enhance` and `echoclean-simgen`."""

from __future__ import annotations

import argparse
import sys

from .pipeline import EngineConfig, process_files


def main(argv=None) -> int:
    p = argparse.ArgumentParser(
        prog="enhance",
        description="Joint echo control and speech enhancement on WAV files.")
    p.add_argument("--mic", required=True, help="microphone WAV (16-bit PCM mono)")
    p.add_argument("--far", required=True, help="far-end (loudspeaker) WAV")
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--model", default="identity",
                   help="weight file (.pnw), or 'identity' for a pass-through stub")
    p.add_argument("--rate", type=int, default=16000, choices=(16000, 48000))
    p.add_argument("--aec-only", action="store_true",
                   help="linear echo canceller only, no suppression stage")
    p.add_argument("--res-only", action="store_true",
                   help="suppression stage only, canceller bypassed")
    p.add_argument("--no-postfilter", action="store_true")
    p.add_argument("--dump-features", metavar="PATH",
                   help="write raw little-endian float32 feature frames")
    p.add_argument("--stats", metavar="JSON", help="write run statistics")
    args = p.parse_args(argv)

    config = EngineConfig(
        rate=args.rate,
        model=None if args.model == "identity" else args.model,
        aec_only=args.aec_only,
        res_only=args.res_only,
        postfilter=not args.no_postfilter,
        dump_features=args.dump_features,
    )
    try:
        stats = process_files(args.mic, args.far, args.out, config,
                              stats_path=args.stats)
    except (ValueError, OSError) as exc:
        print(f"enhance: {exc}", file=sys.stderr)
        return 1
    print(f"frames={stats.frames} erle_star={stats.erle_star_db:.2f} dB "
          f"rtf={stats.rtf:.4f} delay={stats.delay_ms:.1f} ms "
          f"nan_frames={stats.nan_frames}")
    return 0


def simgen_main(argv=None) -> int:
    from . import simgen
    from .pipeline import write_wav

    p = argparse.ArgumentParser(
        prog="echoclean-simgen",
        description="Render synthetic echo/noise scenarios and training data.")
    p.add_argument("--spec", help="scenario spec file (key=value stanzas)")
    p.add_argument("--seed", type=int, default=0,
                   help="single-scenario seed when --spec is not given")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--wav", action="store_true", help="write mic/far/target WAVs")
    p.add_argument("--export", action="store_true",
                   help="write PND1 training records (features + band targets)")
    p.add_argument("--no-aec", action="store_true",
                   help="export features without the echo canceller in front")
    args = p.parse_args(argv)

    if args.spec:
        with open(args.spec) as fh:
            scenarios = simgen.parse_scenarios(fh.read())
    else:
        scenarios = [simgen.Scenario(seed=args.seed)]
    if not scenarios:
        print("simgen: no scenarios parsed", file=sys.stderr)
        return 1

    import os
    os.makedirs(args.out_dir, exist_ok=True)
    if args.wav:
        for sc in scenarios:
            rend = simgen.render_scenario(sc)
            stem = os.path.join(args.out_dir, f"scenario_{sc.seed:05d}")
            write_wav(stem + "_mic.wav", rend.mic, sc.rate)
            write_wav(stem + "_far.wav", rend.far, sc.rate)
            write_wav(stem + "_target.wav", rend.target, sc.rate)
    if args.export:
        simgen.export_dataset(scenarios, args.out_dir,
                              include_aec=not args.no_aec)
    print(f"wrote {len(scenarios)} scenario(s) to {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
