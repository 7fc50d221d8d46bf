"""Command-line entry point: synth, train, loocv, eval, gee, saliency, audit."""

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import config as configmod
from . import data as datamod
from . import encoder, explain, gee, io, training
from .checkpoint import CheckpointError
from .model import Model, dataset_inputs

log = logging.getLogger("rvt")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}
RUNTIME_ERRORS = (datamod.DataError, training.TrainingError, gee.GeeError, CheckpointError,
                  configmod.ConfigError, encoder.EncoderError, OSError, ValueError)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _write_text(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _write_json(path, obj):
    _write_text(path, io.dumps_json(obj))


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise datamod.DataError(f"missing {path}") from None


def _write_csv(path, header, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError:
        raise datamod.DataError(f"missing {path}") from None


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _run_config(args):
    preset = getattr(args, "preset", None)
    if args.config:
        cfg = configmod.load(args.config)
        if preset and preset != cfg.preset:
            raise UsageError("--preset conflicts with the preset named in --config")
    else:
        cfg = configmod.RunConfig.from_preset(preset or "reference")
    overrides = {}
    if getattr(args, "freeze_encoder", False):
        overrides["freeze_encoder"] = True
    if getattr(args, "ablate_recurrence", False):
        overrides["ablate_recurrence"] = True
    return cfg.with_overrides(seed=args.seed, mode=getattr(args, "mode", None), **overrides)


def _load_data(path, mode):
    if not path:
        raise UsageError("--data is required")
    return io.load_dataset(path, mode)


def _prediction_rows(preds, nc):
    for r in preds:
        row = [r["participant_id"], r["session_index"], r["clip_index"], r["true"],
               r["decision"], float(r["gifs"])]
        if nc > 2:
            row += [float(v) for v in r["probs"]]
        yield row


def _prediction_header(nc):
    head = ["participant_id", "session_index", "clip_index", "true", "decision", "gifs"]
    return head + [f"p{c}" for c in range(nc)] if nc > 2 else head


def _trace_rows(traces):
    for (pid, idx), tr in sorted(traces.items()):
        for j, (g, d, hn) in enumerate(zip(tr.gifs, tr.decisions, tr.hidden_norms()), start=1):
            yield [pid, idx, j, float(g), d, float(hn)]


TRACE_HEADER = ["participant_id", "session_index", "clip_index", "gifs", "decision",
                "hidden_norm"]


def _data_record(path):
    mpath = io.manifest_path(path)
    return {"manifest": os.path.abspath(mpath), "sha256": _sha256(mpath)}


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args):
    if not args.out:
        raise UsageError("--out is required")
    cfg = configmod.load(args.config).synth if args.config else datamod.SynthConfig()
    over = {k: v for k, v in (("n_participants", args.participants),
                              ("sessions_per_participant", args.sessions),
                              ("clips_per_session", args.clips)) if v is not None}
    if over:
        cfg = dataclasses.replace(cfg, **over)
    ds = datamod.generate_synthetic(cfg.validate(), seed=args.seed or 0)
    path = io.write_dataset(ds, args.out, args.format)
    n = len(ds.sessions)
    log.info("wrote %d sessions, %d clips to %s", n, sum(s.n_clips for s in ds.sessions), path)
    print(path)
    return 0


def _save_fold(run_dir, fr, mode, ds_participants):
    d = os.path.join(run_dir, "folds", fr.participant_id)
    fr.model.save(d)
    nc = datamod.n_classes(mode)
    _write_csv(os.path.join(d, "predictions.csv"), _prediction_header(nc),
               _prediction_rows(fr.predictions, nc))
    _write_csv(os.path.join(d, "loss.csv"), ["epoch", "loss"],
               ((i + 1, float(v)) for i, v in enumerate(fr.loss_curve)))
    _write_json(os.path.join(d, "split.json"),
                {"test": [fr.participant_id], "train": list(fr.train_participants),
                 "all": list(ds_participants)})


def cmd_loocv(args):
    if not args.out:
        raise UsageError("--out is required")
    cfg = _run_config(args)
    ds = _load_data(args.data, cfg.mode)
    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, "config.ini"))
    _write_json(os.path.join(args.out, "data.json"), _data_record(args.data))
    inputs = dataset_inputs(ds, cfg.encoder)
    log.info("loocv over %d participants, jobs=%d", len(ds.participants()), args.jobs)
    results = training.run_loocv(ds, cfg.train, cfg.encoder, jobs=args.jobs, inputs=inputs)
    traces = {}
    for fr in results:
        _save_fold(args.out, fr, cfg.mode, ds.participants())
        traces.update(fr.traces)
    _write_csv(os.path.join(args.out, "traces.csv"), TRACE_HEADER, _trace_rows(traces))
    report = training.aggregate(results, cfg.mode)
    _write_json(os.path.join(args.out, "report.json"), report)
    _print_summary(report)
    return 0


def cmd_train(args):
    if not args.out:
        raise UsageError("--out is required")
    cfg = _run_config(args)
    ds = _load_data(args.data, cfg.mode)
    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, "config.ini"))
    _write_json(os.path.join(args.out, "data.json"), _data_record(args.data))
    inputs = dataset_inputs(ds, cfg.encoder)
    model, history = training.train_one(ds, cfg.train, cfg.encoder, inputs)
    model.save(os.path.join(args.out, "model"))
    _write_csv(os.path.join(args.out, "loss.csv"), ["epoch", "loss"],
               ((i + 1, float(v)) for i, v in enumerate(history)))
    traces, _ = training.predict(model, ds, inputs)
    _write_csv(os.path.join(args.out, "traces.csv"), TRACE_HEADER, _trace_rows(traces))
    _write_json(os.path.join(args.out, "report.json"),
                {"participants": ds.participants(), "n_sessions": len(ds.sessions),
                 "loss": [float(v) for v in history]})
    print(f"final loss {history[-1]:.6f}")
    return 0


def _fold_dirs(run_dir):
    root = os.path.join(run_dir, "folds")
    if not os.path.isdir(root):
        raise datamod.DataError(f"{run_dir} has no folds/ directory; not a loocv run")
    return [os.path.join(root, d) for d in sorted(os.listdir(root))
            if os.path.isdir(os.path.join(root, d))]


def load_fold_results(run_dir, mode):
    """FoldResults rebuilt from the CSV files of a run directory (no models)."""
    nc = datamod.n_classes(mode)
    out = []
    for d in _fold_dirs(run_dir):
        preds = []
        for r in _read_csv(os.path.join(d, "predictions.csv")):
            row = {"participant_id": r["participant_id"],
                   "session_index": int(r["session_index"]), "clip_index": int(r["clip_index"]),
                   "true": int(r["true"]), "decision": int(r["decision"]),
                   "gifs": float(r["gifs"])}
            if nc > 2:
                row["probs"] = [float(r[f"p{c}"]) for c in range(nc)]
            preds.append(row)
        loss = [float(r["loss"]) for r in _read_csv(os.path.join(d, "loss.csv"))]
        split = _read_json(os.path.join(d, "split.json"))
        out.append(training.FoldResult(os.path.basename(d), preds, loss,
                                       train_participants=tuple(split["train"])))
    return out


def _run_mode(run_dir):
    return configmod.load(os.path.join(run_dir, "config.ini")).mode


def cmd_eval(args):
    if not args.run:
        raise UsageError("--run is required")
    mode = _run_mode(args.run)
    report = training.aggregate(load_fold_results(args.run, mode), mode)
    out = {"report": report}
    if args.compare:
        other = training.aggregate(load_fold_results(args.compare, _run_mode(args.compare)), mode)
        out["comparison"] = training.compare(report, other, args.metric)
    _write_json(os.path.join(args.run, "eval.json"), out)
    _print_summary(report)
    if args.compare:
        c = out["comparison"]
        print(f"wilcoxon {args.metric}: mean {c['mean_a']} vs {c['mean_b']}, "
              f"W={c['W']} p={c['p']} n={c['n_nonzero']}")
    return 0


def _print_summary(report):
    p = report["pooled"]
    fold = report["across_folds"]["bacc"]
    print(f"pooled bacc={p['bacc']} auc={p['auc']} accuracy={p['accuracy']}; "
          f"fold-mean bacc={fold['mean']} (sd {fold['sd']}, {fold['n_folds']} folds)")


def load_traces(path):
    traces = {}
    for r in _read_csv(path):
        key = (r["participant_id"], int(r["session_index"]))
        traces.setdefault(key, []).append((int(r["clip_index"]), float(r["gifs"])))
    return {k: [g for _, g in sorted(v)] for k, v in traces.items()}


def cmd_gee(args):
    ds = _load_data(args.data, "binary")
    traces = None
    if args.run:
        traces = load_traces(os.path.join(args.run, "traces.csv"))
    elif args.traces:
        traces = load_traces(args.traces)
    if traces is None:
        table = gee.session_table(ds)
        fits = {name: gee.fit_gee(table, terms, corr=args.corr, standardize=args.standardize)
                for name, terms in gee.MODELS.items() if "gifs" not in terms}
        result = gee.Validation(fits)
    else:
        result = gee.validate_gifs(ds, traces, args.aggregation, args.corr, args.standardize)
    out_dir = args.out or args.run
    if out_dir:
        _write_json(os.path.join(out_dir, "gee.json"), result.to_dict())
        _write_text(os.path.join(out_dir, "gee.txt"), result.format() + "\n")
    print(result.format())
    return 0


def cmd_saliency(args):
    if not args.run or not args.out:
        raise UsageError("--run and --out are required")
    mode = _run_mode(args.run)
    ds = _load_data(args.data, mode)
    fold_dirs = _fold_dirs(args.run)
    if args.participant:
        fold_dirs = [d for d in fold_dirs if os.path.basename(d) in args.participant]
        if not fold_dirs:
            raise datamod.DataError(f"no fold for participants {args.participant}")
    size = None
    maps, landmarks, fractions, rows = [], [], [], []
    for d in fold_dirs:
        pid = os.path.basename(d)
        model = Model.load(d)
        for s in ds.subset([pid]).sessions:
            clips = s.clips if args.clips == "all" else (s.clips[0], s.clips[-1])
            for c in clips:
                pc = encoder.compose_input(c.frames, int(c.mask))
                m = explain.saliency(pc, model, args.target, method=args.method,
                                     clip_id=(pid, s.index, c.index))
                size = m.values.shape[0]
                band = np.zeros(m.values.shape, dtype=bool)
                r0, r1 = datamod.eye_band_rows(size)
                band[r0:r1] = True
                frac = explain.top_fraction_inside(m.values, band)
                stem = os.path.join(args.out, "maps", f"{pid}_s{s.index:02d}_c{c.index:03d}")
                io.write_bytes(stem + ".pgm", io.encode_pgm(explain.heatmap_u8(m.values)))
                mean_frame = pc.composed[:, 0].mean(axis=0)
                io.write_bytes(stem + "_overlay.ppm",
                               io.encode_ppm(explain.overlay_rgb(m.values, mean_frame)))
                maps.append(m)
                if s.landmarks:
                    landmarks.append(s.landmarks)
                fractions.append(frac)
                rows.append([pid, s.index, c.index, frac, m.degenerate])
    if not maps:
        raise datamod.DataError("no clips to explain")
    mean_map = np.mean([m.values for m in maps], axis=0)
    band = np.zeros(mean_map.shape, dtype=bool)
    r0, r1 = datamod.eye_band_rows(size)
    band[r0:r1] = True
    io.write_bytes(os.path.join(args.out, "mean_map.pgm"),
                   io.encode_pgm(explain.heatmap_u8(explain.normalize(mean_map)[0])))
    _write_csv(os.path.join(args.out, "maps.csv"),
               ["participant_id", "session_index", "clip_index", "top_decile_eye_fraction",
                "degenerate"], rows)
    summary = {"n_maps": len(maps), "target": args.target, "method": args.method,
               "eye_rows": [r0, r1],
               "top_decile_eye_fraction_mean_map": explain.top_fraction_inside(mean_map, band),
               "top_decile_eye_fraction_per_map": float(np.mean(fractions))}
    if len(landmarks) == len(maps):
        rep = explain.aggregate_landmarks(maps, landmarks, args.radius)
        names = ds.meta.get("landmark_names") or [str(i) for i in rep.values]
        _write_csv(os.path.join(args.out, "landmarks.csv"), ["landmark_id", "x", "y", "value"],
                   ([i, rep.coords[i][0], rep.coords[i][1], rep.values[i]]
                    for i in sorted(rep.values)))
        summary["landmarks"] = {names[i]: rep.values[i] for i in rep.ranked()}
        summary["clamped"] = rep.clamped
        regions = ds.meta.get("landmark_regions")
        if regions:
            summary["region_means"] = {k: explain.region_mean(rep, v) for k, v in regions.items()}
    _write_json(os.path.join(args.out, "saliency.json"), summary)
    print(f"{len(maps)} maps; top-decile eye-band fraction "
          f"{summary['top_decile_eye_fraction_mean_map']:.3f} (mean map), "
          f"{summary['top_decile_eye_fraction_per_map']:.3f} (per-map average)")
    return 0


def audit_run(run_dir, data_path=None):
    """Leakage and integrity findings for one run directory; empty list means clean."""
    problems = []
    dirs = _fold_dirs(run_dir)
    tested = []
    universe = None
    for d in dirs:
        pid = os.path.basename(d)
        split = _read_json(os.path.join(d, "split.json"))
        train, test = set(split["train"]), set(split["test"])
        overlap = sorted(train & test)
        if overlap:
            problems.append(f"fold {pid}: participants in both train and test: {overlap}")
        if test != {pid}:
            problems.append(f"fold {pid}: test set {sorted(test)} is not the fold participant")
        preds = _read_csv(os.path.join(d, "predictions.csv"))
        foreign = sorted({r["participant_id"] for r in preds} - test)
        if foreign:
            problems.append(f"fold {pid}: predictions for non-test participants {foreign}")
        tested.append(pid)
        all_ids = set(split.get("all", []))
        universe = all_ids if universe is None else universe
        if all_ids != universe:
            problems.append(f"fold {pid}: participant universe differs from other folds")
        if (train | test) != all_ids:
            problems.append(f"fold {pid}: train + test do not cover all participants")
    if universe is not None and set(tested) != universe:
        problems.append(f"folds cover {sorted(tested)}, participants are {sorted(universe)}")
    rec_path = os.path.join(run_dir, "data.json")
    if os.path.isfile(rec_path):
        rec = _read_json(rec_path)
        mpath = io.manifest_path(data_path) if data_path else rec["manifest"]
        if os.path.isfile(mpath):
            if _sha256(mpath) != rec["sha256"]:
                problems.append(f"manifest {mpath} changed since the run")
            manifest = io.read_manifest(mpath)
            pids = {e["participant_id"] for e in manifest["sessions"]}
            if universe is not None and pids != universe:
                problems.append("manifest participants differ from the run's folds")
            root = os.path.dirname(os.path.abspath(mpath))
            missing = [f for e in manifest["sessions"] for f in e["frames"]
                       if not os.path.isfile(os.path.join(root, f))]
            if missing:
                problems.append(f"{len(missing)} frame files missing, e.g. {missing[0]}")
        else:
            problems.append(f"manifest {mpath} not found")
    return {"run": run_dir, "folds": len(dirs), "problems": problems}


def cmd_audit(args):
    if not args.run:
        raise UsageError("--run is required")
    ok = True
    reports = []
    for run in args.run:
        rep = audit_run(run, args.data)
        reports.append(rep)
        status = "OK" if not rep["problems"] else "FAIL"
        ok = ok and not rep["problems"]
        print(f"{status} {run}: {rep['folds']} folds, zero train/test participant overlap"
              if status == "OK" else f"{status} {run}")
        for p in rep["problems"]:
            print(f"  {p}")
    if args.out:
        _write_json(args.out, {"runs": reports, "ok": ok})
    return 0 if ok else 1


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _common(p, train=False):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="INI run configuration")
    p.add_argument("--data", default=None, help="dataset directory or manifest")
    p.add_argument("--out", default=None)
    if train:
        p.add_argument("--mode", choices=("binary", "three"), default=None)
        p.add_argument("--preset", choices=configmod.PRESETS, default=None)
        p.add_argument("--freeze-encoder", action="store_true")
        p.add_argument("--ablate-recurrence", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="rvt", description=__doc__)
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--format", choices=io.FORMATS, default="pgm")
    p.add_argument("--participants", type=int, default=None)
    p.add_argument("--sessions", type=int, default=None)
    p.add_argument("--clips", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on a whole dataset")
    _common(p, train=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("loocv", help="leave-one-participant-out training and testing")
    _common(p, train=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_loocv)

    p = sub.add_parser("eval", help="recompute metrics of a loocv run")
    p.add_argument("--run", required=False)
    p.add_argument("--compare", default=None, help="second run for a paired Wilcoxon test")
    p.add_argument("--metric", default="bacc", choices=training.METRIC_KEYS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gee", help="reaction-time GEE validation")
    _common(p)
    p.add_argument("--run", default=None, help="run directory with traces.csv")
    p.add_argument("--traces", default=None)
    p.add_argument("--corr", choices=gee.CORRS, default="ar1")
    p.add_argument("--aggregation", choices=gee.GIFS_AGGREGATIONS, default="mean")
    p.add_argument("--standardize", action="store_true")
    p.set_defaults(func=cmd_gee)

    p = sub.add_parser("saliency", help="saliency maps and landmark report of a loocv run")
    _common(p)
    p.add_argument("--run", default=None)
    p.add_argument("--participant", action="append", default=None)
    p.add_argument("--target", choices=explain.TARGETS, default="gifs")
    p.add_argument("--method", choices=explain.METHODS, default="grad")
    p.add_argument("--clips", choices=("endpoints", "all"), default="endpoints")
    p.add_argument("--radius", type=int, default=3)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("audit", help="check fold leakage and manifest integrity")
    p.add_argument("--run", action="append", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_audit)
    return ap


def _setup_logging():
    name = os.environ.get("RVT_LOG_LEVEL", "warn").strip().lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"RVT_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        if getattr(args, "seed", None) is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        return args.func(args)
    except UsageError as exc:
        print(f"rvt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"rvt {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
