"""Command-line entry point: ``nel-pose <subcommand> [options]``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import harness as hn
from .config import ConfigError, load_experiment

log = logging.getLogger("nel_pose")

SUBCOMMANDS = {
    "estimate": "single-frame pose estimation on synthetic scenes",
    "track": "particle-filter tracking through a scripted occlusion",
    "camera-track": "drifting-camera tracking against per-frame estimation",
    "hypotheses": "write the ranked pose hypotheses for one scene",
    "render": "write the ground-truth render and observation for one scene",
    "selftest": "brute-force oracle checks of the fast kernels",
    "bench": "per-stage wall times",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nel-pose", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in SUBCOMMANDS.items():
        s = sub.add_parser(name, allow_abbrev=False, help=text, description=text)
        s.add_argument("--config", help="INI experiment file (defaults apply when omitted)")
        s.add_argument("--seed", type=int, help="overrides experiment.seed")
        s.add_argument("--output-dir", default="nel_pose_out", help="all files are written here")
        s.add_argument("--verbosity", type=int, default=1, choices=(0, 1, 2))
        s.add_argument("--threads", type=int, help="inner parallelism, 0 = all cores (env NEL_POSE_THREADS)")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", dest="overrides")
        if name in ("hypotheses", "render"):
            s.add_argument("--scene", type=int, default=0, help="scene index")
        if name == "track":
            s.add_argument("--particles", type=int, help="overrides tracking.n_particles")
    return p


def set_threads(requested: int | None) -> int:
    import numba

    if requested is None:
        env = os.environ.get("NEL_POSE_THREADS", "").strip()
        requested = int(env) if env else 0
    if requested < 0:
        raise ConfigError(f"--threads must be >= 0, got {requested}")
    top = numba.config.NUMBA_NUM_THREADS
    n = top if requested == 0 else min(requested, top)
    numba.set_num_threads(n)
    return n


def manifest(command: str, exp: hn.Experiment, raw: dict, extra: dict | None = None) -> dict:
    out = {"command": command, "run_id": exp.run_id, "seed": exp.seed, "config": raw}
    out.update(extra or {})
    return out


def _say(args, msg: str):
    if args.verbosity > 0:
        print(msg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_estimate(args, exp, raw) -> int:
    world = hn.build_world(exp)
    records, extra = [], []
    for s in range(exp.n_scenes):
        out = hn.run_msigp(exp, s, world)
        recs = hn.msigp_records(exp, s, out, world)
        records += recs
        extra.append(
            {
                "kind": "trace",
                "scene_id": s,
                "increasing": hn.trace_is_increasing(out.result.trace),
                "trace": [[t.step, t.phase, t.obj, round(t.old, 6), round(t.new, 6)] for t in out.result.trace],
            }
        )
        for r in recs:
            log.info("scene %d object %d: rot %.2f deg, trans %.2f mm", s, r["object_id/frame"], r["rot_err_deg"],
                     r["trans_err_mm"])
    hn.write_results(args.output_dir, records, manifest("estimate", exp, raw), extra)
    ok = sum(r["rot_err_deg"] < 5 and r["trans_err_mm"] < 5 for r in records)
    _say(args, f"{ok}/{len(records)} objects within 5 deg / 5 mm; results in {args.output_dir}")
    return 0


def cmd_track(args, exp, raw) -> int:
    spec = exp.tracking
    counts = [args.particles or spec.n_particles]
    if spec.n_particles_small > 0 and spec.n_particles_small not in counts:
        counts.append(spec.n_particles_small)
    world = hn.tracking_world(exp)
    records, extra = [], []
    for n in counts:
        reacq = 0
        for s in range(spec.n_seeds):
            out = hn.run_tracking(exp, s, n, world)
            reacq += out.reacquired
            records += [dict(r, run_id=f"{exp.run_id}/p{n}") for r in hn.tracking_records(exp, s, out)]
            extra.append(
                {
                    "kind": "tracking",
                    "particles": n,
                    "seed_index": s,
                    "reappear_frame": out.reappear,
                    "full_occlusion": out.full_occlusion,
                    "reacquired": out.reacquired,
                    "spread_ratio": round(hn.spread_ratio(out), 6),
                    "spreads": [round(x, 6) for x in out.spreads],
                    "max_weight_sum_err": out.max_weight_sum_err,
                }
            )
        _say(args, f"{n} particles: re-acquired in {reacq}/{spec.n_seeds} runs")
    hn.write_results(args.output_dir, records, manifest("track", exp, raw), extra)
    return 0


def cmd_camera_track(args, exp, raw) -> int:
    out = hn.run_camera_benchmark(exp, 0)
    records = []
    for method, errs in (("tracked", out.tracked_errors), ("single", out.single_errors)):
        for (scene, frame, cls), e in zip(out.labels, errs):
            records.append(hn.result_record(f"{exp.run_id}/{method}", scene, frame, cls, e, 0.0, 0.0))
    summary = {
        "kind": "camera_track",
        "tracked_mean_rot_deg": round(float(np.mean(out.tracked_rot)), 6),
        "single_mean_rot_deg": round(float(np.mean(out.single_rot)), 6),
    }
    hn.write_results(args.output_dir, records, manifest("camera-track", exp, raw), [summary])
    _say(args, f"mean rotation error: tracked {summary['tracked_mean_rot_deg']:.3f} deg, "
               f"single-frame {summary['single_mean_rot_deg']:.3f} deg")
    return 0


def cmd_hypotheses(args, exp, raw) -> int:
    from .hypotheses import generate_hypotheses

    world = hn.build_world(exp)
    rng = np.random.default_rng([exp.seed, args.scene])
    gt, obs, _ = hn.make_scene(exp.scene, world, rng)
    rg = hn.rotation_grid(exp.hypotheses.n_axes, exp.hypotheses.n_inplane)
    lines = []
    for cls in sorted(set(gt.class_ids)):
        hyps = generate_hypotheses(obs, world.models[cls], exp.hypotheses, rg)
        truth = [p for c, p in gt.objects if c == cls]
        for rank, h in enumerate(hyps):
            errs = [hn.pose_errors(h.pose, t, world.meshes[cls]) for t in truth]
            best = min(errs, key=lambda e: e.add)
            lines.append(
                {
                    "class": world.class_names[cls - 1],
                    "rank": rank,
                    "score": round(h.score, 6),
                    "rotation": [round(float(v), 9) for v in h.pose.rotation],
                    "translation": [round(float(v), 6) for v in h.pose.translation],
                    "rot_err_deg": round(best.rotation_err, 6),
                    "trans_err_mm": round(best.translation_err, 6),
                }
            )
    os.makedirs(args.output_dir, exist_ok=True)
    with open(os.path.join(args.output_dir, "hypotheses.jsonl"), "w") as f:
        for ln in lines:
            f.write(json.dumps(ln, sort_keys=True) + "\n")
    with open(os.path.join(args.output_dir, "manifest.json"), "w") as f:
        json.dump(manifest("hypotheses", exp, raw, {"scene": args.scene}), f, indent=2, sort_keys=True)
        f.write("\n")
    _say(args, f"{len(lines)} hypotheses written to {args.output_dir}")
    return 0


def cmd_render(args, exp, raw) -> int:
    world = hn.build_world(exp)
    rng = np.random.default_rng([exp.seed, args.scene])
    gt, obs, rend = hn.make_scene(exp.scene, world, rng)
    os.makedirs(args.output_dir, exist_ok=True)
    np.savez(
        os.path.join(args.output_dir, "render.npz"),
        depth=rend.depth, segmentation=rend.segmentation, instance=rend.instance,
        object_coords=rend.object_coords, observed_points=obs.point_cloud,
    )
    scene = [
        {"class": world.class_names[c - 1], "rotation": [float(v) for v in p.rotation],
         "translation": [float(v) for v in p.translation]}
        for c, p in gt.objects
    ]
    with open(os.path.join(args.output_dir, "scene.json"), "w") as f:
        json.dump(scene, f, indent=2, sort_keys=True)
        f.write("\n")
    _say(args, f"rendered {rend.fg_count} foreground pixels to {args.output_dir}")
    return 0


def cmd_selftest(args, exp, raw) -> int:
    from .selftest import run_all

    results = run_all(exp.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    os.makedirs(args.output_dir, exist_ok=True)
    with open(os.path.join(args.output_dir, "selftest.json"), "w") as f:
        json.dump([{"suite": n, "pass": ok, "detail": d} for n, ok, d in results], f, indent=2, sort_keys=True)
        f.write("\n")
    return 0 if all(ok for _, ok, _ in results) else 2


def cmd_bench(args, exp, raw) -> int:
    from .inference import DynamicsParams, ParticleSet, particle_filter_step
    from .geometry import GaussianVmfParams, Pose

    world = hn.build_world(exp)
    rng = np.random.default_rng([exp.seed, 0])
    gt, obs, _ = hn.make_scene(exp.scene, world, rng)
    timer = hn.Timer(True)
    hn.estimate_scene(obs, gt.class_ids, world, exp, rng, timer)  # warm-up (compilation)
    rows = []
    timer = hn.Timer(True)
    rg = hn.rotation_grid(exp.hypotheses.n_axes, exp.hypotheses.n_inplane)
    from .hypotheses import generate_hypotheses
    from .inference import SearchSchedule, stochastic_search

    with timer("hypotheses"):
        hyps = {c: generate_hypotheses(obs, world.models[c], exp.hypotheses, rg) for c in sorted(set(gt.class_ids))}
    fallback = Pose.from_translation([0.0, 0.0, float(np.mean(exp.scene.depth_range))])
    init = hn.initial_scene(gt.class_ids, hyps, world.num_classes, fallback)
    hyp_poses = {c: [h.pose for h in hs] for c, hs in hyps.items()}
    scene = init
    scorer = world.scorer(obs, exp.likelihood)
    for i, phase in enumerate(exp.schedule.phases):
        with timer(f"phase {i + 1} ({phase.kind})"):
            scene = stochastic_search(scene, scorer, SearchSchedule((phase,)), hyp_poses, rng).scene
    step = GaussianVmfParams(exp.tracking.position_sigma, exp.tracking.rotation_concentration)
    dyn = DynamicsParams((step,) * len(gt.objects))
    ps = ParticleSet.uniform(gt, exp.tracking.n_particles)
    with timer("filter step"):
        particle_filter_step(ps, scorer, dyn, rng)
    for stage, ms in timer.stages.items():
        rows.append((stage, ms))
        print(f"{stage:32s} {ms:10.1f} ms")
    os.makedirs(args.output_dir, exist_ok=True)
    with open(os.path.join(args.output_dir, "bench.json"), "w") as f:
        json.dump({k: round(v, 3) for k, v in rows}, f, indent=2)
        f.write("\n")
    return 0


COMMANDS = {
    "estimate": cmd_estimate,
    "track": cmd_track,
    "camera-track": cmd_camera_track,
    "hypotheses": cmd_hypotheses,
    "render": cmd_render,
    "selftest": cmd_selftest,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level={0: logging.WARNING, 1: logging.WARNING, 2: logging.INFO}[args.verbosity],
        format="%(levelname)s %(message)s",
    )
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"experiment.seed={args.seed}")
        exp, raw = load_experiment(args.config, overrides)
        set_threads(args.threads)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        for name in exp.scene.classes:
            hn.resolve_mesh(name, exp.mesh_paths)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args, exp, raw)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
