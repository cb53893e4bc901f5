"""Command-line front end: gen-data, train, attack, eval, check.

Every command writes a ``manifest.json`` into its output directory. Any
flag may also come from ``--config FILE`` (``key = value`` lines, or a
previous run's manifest.json); flags on the command line win.
"""

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, replace

import numpy as np

from . import (CapacityError, ConfigError, DataError, NumericError, ParseError, SaliencyStrikeError,
               VersionError, __version__)
from . import attack, checks, data, defense, evaluation, victim

log = logging.getLogger("saliencystrike")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FILE = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5

VARIANTS = ["l3a", "global-base", "rp"] + [f"group{g}" for g in attack.ABLATION_GROUPS]


class CheckFailure(SaliencyStrikeError):
    pass


def _csv_list(kind):
    def parse(text):
        return [kind(v) for v in str(text).split(",") if v.strip()]
    return parse


def _arch(text):
    name = str(text).replace("-", "_")
    if name not in victim.ARCHS:
        raise argparse.ArgumentTypeError(f"unknown arch {text!r}")
    return name


def _bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_attack_flags(p):
    d = attack.AttackConfig()
    p.add_argument("--variant", choices=VARIANTS, default="l3a")
    p.add_argument("--distance", choices=["l2", "chamfer", "hausdorff"], default=d.distance)
    p.add_argument("--lambda", dest="budget", type=float, default=d.budget)
    p.add_argument("--kappa1", type=float, default=d.kappa1)
    p.add_argument("--kappa2", type=float, default=d.kappa2)
    p.add_argument("--kappa3", type=float, default=d.kappa3)
    p.add_argument("--mu", dest="margin", type=float, default=d.margin)
    p.add_argument("--m", type=int, default=None, help=f"salient vertices (default {d.m})")
    p.add_argument("--n", type=int, default=None, help=f"cluster size (default {d.n})")
    p.add_argument("--iters", type=int, default=d.iters)
    p.add_argument("--warmup", type=float, default=d.warmup)
    p.add_argument("--h", type=float, default=None, help="PWA activation threshold (default 0.1 * lambda)")
    p.add_argument("--w-mode", choices=["absolute", "percentile"], default=d.w_mode)
    p.add_argument("--w", type=float, default=d.w)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--beta1", type=float, default=d.beta1)
    p.add_argument("--beta2", type=float, default=d.beta2)
    p.add_argument("--global", dest="global_attack", action="store_true", help="perturb every point")
    p.add_argument("--no-score", action="store_true")
    p.add_argument("--no-cons", action="store_true")
    p.add_argument("--no-pwa", action="store_true")
    p.add_argument("--no-early-stop", action="store_true")
    p.add_argument("--patience", type=int, default=d.patience)
    p.add_argument("--float-preferred", action="store_true")
    p.add_argument("--seed", type=int, default=d.seed)


def attack_config_from_args(args, variant=None):
    """AttackConfig from parsed flags: preset first, explicit toggles on top."""
    variant = variant or args.variant
    if args.global_attack and (args.m is not None or args.n is not None):
        raise ConfigError("--global cannot be combined with --m/--n")
    base = attack.AttackConfig()
    cfg = attack.AttackConfig(
        distance=args.distance, budget=args.budget, kappa1=args.kappa1, kappa2=args.kappa2, kappa3=args.kappa3,
        margin=args.margin, m=base.m if args.m is None else args.m, n=base.n if args.n is None else args.n,
        iters=args.iters, warmup=args.warmup, h=args.h, w_mode=args.w_mode, w=args.w, gamma=args.gamma,
        lr=args.lr, beta1=args.beta1, beta2=args.beta2, early_stop=not args.no_early_stop,
        patience=args.patience, float_preferred=args.float_preferred, seed=args.seed,
    )
    cfg = attack.resolve_variant(variant, cfg)
    toggles = {}
    if args.global_attack:
        toggles["local"] = False
    if args.no_score:
        toggles["use_score"] = False
    if args.no_cons:
        toggles["use_cons"] = False
    if args.no_pwa:
        toggles["use_pwa"] = False
    return replace(cfg, **toggles) if toggles else cfg


def build_parser():
    parser = argparse.ArgumentParser(prog="saliencystrike", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shape dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--classes", type=_csv_list(str), default=list(data.SHAPE_KINDS))
    p.add_argument("--per-class-train", type=int, default=100)
    p.add_argument("--per-class-test", type=int, default=30)
    p.add_argument("--n-points", type=int, default=256)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a victim model")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--arch", type=_arch, default="pointnet_mini")
    p.add_argument("--widths", type=_csv_list(int), default=[32, 64])
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--epochs", type=int, default=victim.TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=victim.TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=victim.TrainConfig.lr)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("attack", help="attack the test split")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.add_argument("--limit", type=int, default=None, help="attack only the first N test clouds")
    _add_attack_flags(p)

    p = sub.add_parser("eval", help="score attacks, defenses and experiment grids")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--table", choices=["attacks", "fig1", "main", "ablation", "sweep", "baselines"],
                   default="attacks")
    p.add_argument("--attacks", nargs="*", default=[], help="attack output directories")
    p.add_argument("--data")
    p.add_argument("--ckpt", nargs="*", default=[])
    p.add_argument("--defense", type=_csv_list(str), default=["none"])
    p.add_argument("--srs-drop", type=float, default=0.125)
    p.add_argument("--sor-k", type=int, default=2)
    p.add_argument("--sor-alpha", type=float, default=1.1)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--budgets", type=_csv_list(float), default=[0.001, 0.0025, 0.005])
    p.add_argument("--distances", type=_csv_list(str), default=["l2", "chamfer", "hausdorff"])
    p.add_argument("--m-values", type=_csv_list(int), default=[30, 40, 50])
    p.add_argument("--n-values", type=_csv_list(int), default=[30, 40, 50])
    _add_attack_flags(p)

    p = sub.add_parser("check", help="run the built-in gradient and metric self-checks")
    p.add_argument("--config")
    p.add_argument("--json", action="store_true")
    p.add_argument("--quick", action="store_true", help="2 seeds instead of 5")
    p.add_argument("--out", default=None)
    return parser


# checked after any --config file is merged, so the file may supply them
REQUIRED = {"gen-data": ["out"], "train": ["data", "out"], "attack": ["data", "ckpt", "out"], "eval": ["out"]}


def read_config_file(path):
    """Flag values from ``key = value`` lines or from a manifest.json."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".json"):
        doc = json.loads(text)
        return dict(doc.get("flags", doc))
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _apply_config(sub, args, argv):
    """Re-parse with config-file values as defaults so command-line flags override them."""
    values = read_config_file(args.config)
    by_name = {}
    for action in sub._actions:
        for opt in action.option_strings:
            by_name[opt.lstrip("-").replace("-", "_")] = action
        by_name[action.dest] = action
    defaults = {}
    for key, value in values.items():
        action = by_name.get(str(key).lstrip("-").replace("-", "_"))
        if action is None:
            if key in ("command", "config"):
                continue
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            value = _bool(value)
        elif isinstance(value, str) and action.type is not None:
            value = action.type(value)
        elif isinstance(value, list) and action.nargs not in ("*", "+"):
            value = ",".join(str(v) for v in value)
            value = action.type(value) if action.type else value
        defaults[action.dest] = value
    sub.set_defaults(**defaults)
    return sub.parse_args(argv)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def write_manifest(out_dir, command, args, resolved, started, inputs=(), outputs=()):
    flags = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("command", "config", "verbose")}
    manifest = {
        "command": command,
        "flags": flags,
        "resolved_config": _jsonable(resolved),
        "inputs": list(inputs),
        "outputs": list(outputs),
        "seed": flags.get("seed"),
        "started": started,
        "finished": _now(),
        "toolkit_version": __version__,
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def cmd_gen_data(args):
    started = _now()
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise FileExistsError(f"{args.out} exists and is not empty; pass --force to overwrite")
    ds = data.build_dataset(args.per_class_train, args.per_class_test, args.n_points, args.noise, args.seed,
                            kinds=args.classes)
    if args.force:
        for name in ("train", "test"):
            shutil.rmtree(os.path.join(args.out, name), ignore_errors=True)
    os.makedirs(args.out, exist_ok=True)
    data.write_dataset(ds, args.out)
    resolved = {"classes": ds.class_names, "per_class_train": args.per_class_train,
                "per_class_test": args.per_class_test, "n_points": args.n_points, "noise_sd": args.noise,
                "seed": args.seed}
    write_manifest(args.out, "gen-data", args, resolved, started, outputs=["train/", "test/", "manifest.csv"])
    print(f"wrote {len(ds.train)} train + {len(ds.test)} test clouds to {args.out}")
    return EXIT_OK


def _load_dataset(path):
    if not path or not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory not found: {path}")
    return data.read_dataset(path)


def cmd_train(args):
    started = _now()
    ds = _load_dataset(args.data)
    cfg = victim.TrainConfig(args.epochs, args.batch_size, args.lr, args.seed)
    model = victim.build_model(args.arch, ds.num_classes, args.widths,
                               args.k if args.arch == "dgcnn_mini" else None, seed=args.seed)
    model, history = victim.train(model, ds, cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    victim.save_checkpoint(model, ckpt)
    with open(os.path.join(args.out, "train_log.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc", "test_acc"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["loss"])), repr(row["train_acc"]), repr(row["test_acc"])])
    resolved = {"arch": args.arch, "layer_widths": args.widths, "k_neighbors": model.k_neighbors,
                "num_classes": ds.num_classes, "class_names": ds.class_names, "train": asdict(cfg)}
    write_manifest(args.out, "train", args, resolved, started, inputs=[args.data],
                   outputs=["model.ckpt", "train_log.csv"])
    print(f"{args.arch}: final train acc {history[-1]['train_acc']:.3f}, test acc {history[-1]['test_acc']:.3f}")
    return EXIT_OK


def cmd_attack(args):
    started = _now()
    ds = _load_dataset(args.data)
    if not os.path.isfile(args.ckpt):
        raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
    model = victim.load_checkpoint(args.ckpt)
    cfg = attack_config_from_args(args)
    clouds = ds.test[:args.limit] if args.limit else ds.test
    adv_dir = os.path.join(args.out, "adv")
    res_dir = os.path.join(args.out, "results")
    os.makedirs(adv_dir, exist_ok=True)
    os.makedirs(res_dir, exist_ok=True)
    results = []
    for cloud in clouds:
        if args.variant == "rp":
            r = attack.run_rp(model, cloud, cfg)
        else:
            r = attack.run_attack(model, cloud, cfg, variant=args.variant)
        data.save_xyz(r.adversarial, os.path.join(adv_dir, f"{cloud.id}.xyz"))
        _write_json(os.path.join(res_dir, f"{cloud.id}.json"), r.to_dict())
        results.append(r)
        log.info("%s: success=%s pred %d -> %d", cloud.id, r.success, r.clean_pred, r.adv_pred)
    asr = evaluation.attack_success_rate([r.adv_pred for r in results], [r.clean_pred for r in results],
                                         [r.label for r in results])
    summary = {"variant": args.variant, "asr": asr, "n_examples": len(results),
               "mean_final_D": float(np.mean([r.final_D for r in results])) if results else None,
               "config": cfg.to_dict(), "toolkit_version": __version__}
    _write_json(os.path.join(args.out, "summary.json"), summary)
    write_manifest(args.out, "attack", args, {"variant": args.variant, "attack": cfg.to_dict(),
                                              "examples": [c.id for c in clouds]},
                   started, inputs=[args.data, args.ckpt], outputs=["adv/", "results/", "summary.json"])
    print(f"{args.variant}: ASR {'undefined' if asr is None else f'{asr:.3f}'} over {len(results)} clouds")
    return EXIT_OK


def _defenses(args):
    kinds = ["none"] + [k for k in args.defense if k != "none"]
    return [defense.DefenseConfig(k, args.srs_drop, args.sor_k, args.sor_alpha) for k in kinds]


def load_attack_dir(path, ds):
    """Rebuild AttackResults (enough for scoring) from an ``attack`` output directory."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no manifest.json in attack directory {path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg_dict = dict(manifest["resolved_config"]["attack"])
    cfg = attack.AttackConfig(**cfg_dict)
    variant = manifest["resolved_config"]["variant"]
    by_id = {c.id: c for c in ds.test}
    results = []
    for ex in manifest["resolved_config"]["examples"]:
        with open(os.path.join(path, "results", f"{ex}.json"), encoding="utf-8") as fh:
            rec = json.load(fh)
        clean = by_id[ex]
        adv = data.load_xyz(os.path.join(path, "adv", f"{ex}.xyz"), label=clean.label, id=ex)
        mask = np.zeros(len(adv), dtype=bool)
        mask[rec["perturbation_mask"]] = True
        results.append(attack.AttackResult(
            adversarial=adv, success=rec["success"], label=rec["label"], clean_pred=rec["clean_pred"],
            adv_pred=rec["adv_pred"], preferred_class=rec["preferred_class"],
            iterations_used=rec["iterations_used"], final_D=rec["final_D"],
            per_point_displacement=np.array(rec["per_point_displacement"]), mask=mask, variant=variant,
        ))
    return variant, cfg, results, manifest


def _victim_name(path):
    return os.path.basename(os.path.dirname(os.path.abspath(path))) or "victim"


def _emit_all(report, out_dir, stem):
    paths = [evaluation.emit_report(report, "csv", os.path.join(out_dir, f"{stem}.csv")),
             evaluation.emit_report(report, "json", os.path.join(out_dir, f"{stem}.json"))]
    cell_dir = os.path.join(out_dir, "cells")
    for row in report.rows:
        key = evaluation.cell_key(row["victim"], row["distance"], row["budget"], row["defense"], row["variant"])
        if row["grid"] == "sweep":
            key += f"__m{row['m']}_n{row['n']}"
        cell = evaluation.EvalReport([row], [], report.provenance)
        paths.append(evaluation.emit_report(cell, "csv", os.path.join(cell_dir, f"{key}.csv")))
    return paths


def cmd_eval(args):
    started = _now()
    os.makedirs(args.out, exist_ok=True)
    defenses = _defenses(args)
    ds = _load_dataset(args.data)
    if not args.ckpt:
        raise ConfigError("eval needs --ckpt")
    for path in args.ckpt:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"checkpoint not found: {path}")
    victims = {}
    for path in args.ckpt:
        model = victim.load_checkpoint(path)
        name = model.arch if model.arch not in victims else f"{model.arch}_{len(victims)}"
        victims[name] = model
    outputs = []
    if args.table in ("attacks", "fig1"):
        if not args.attacks:
            raise ConfigError(f"--table {args.table} needs --attacks DIR")
        name, model = next(iter(victims.items()))
        report = evaluation.EvalReport(provenance={"toolkit_version": __version__, "attack_dirs": [],
                                                   "defenses": [asdict(d) for d in defenses]})
        for path in args.attacks:
            variant, cfg, results, manifest = load_attack_dir(path, ds)
            report.provenance["attack_dirs"].append({"variant": variant, "config": cfg.to_dict(),
                                                     "examples": len(results)})
            if args.table == "fig1":
                by_id = {c.id: c for c in ds.test}
                hists = [evaluation.cost_contribution_histogram(model, by_id[r.adversarial.id], r.adversarial,
                                                                r.label) for r in results]
                agg = evaluation.aggregate_histograms(hists)
                prov = dict(report.provenance, histogram_points={"unmoved": agg.unmoved, "total": agg.total})
                hist_report = evaluation.EvalReport([], agg.bins, prov)
                stem = f"fig1_{name}__{cfg.distance}__{cfg.budget:g}__none__{variant}"
                outputs.append(evaluation.emit_report(hist_report, "histogram-csv",
                                                      os.path.join(args.out, f"{stem}.csv")))
                report.histogram = agg.bins
                report.provenance["histogram_points"] = prov["histogram_points"]
                continue
            cell = evaluation.GridCell(variant, cfg, "attacks")
            report.rows.extend(evaluation.rows_for_results(name, model, cell, results, defenses))
        if args.table == "attacks":
            outputs += _emit_all(report, args.out, "report")
        else:
            outputs.append(evaluation.emit_report(report, "json", os.path.join(args.out, "fig1.json")))
    else:
        base = attack_config_from_args(args, variant="l3a")
        if args.table == "main":
            cells = evaluation.main_grid(base, args.budgets, args.distances)
        elif args.table == "ablation":
            cells = evaluation.ablation_grid(base)
        elif args.table == "sweep":
            cells = evaluation.sweep_grid(base, args.m_values, args.n_values)
        else:
            cells = evaluation.baseline_grid(base)
        clouds = ds.test[:args.limit] if args.limit else ds.test
        report = evaluation.run_grid(ds, victims, cells, defenses, clouds=clouds)
        outputs += _emit_all(report, args.out, f"grid_{args.table}")
    write_manifest(args.out, "eval", args, {"table": args.table, "defenses": [asdict(d) for d in defenses]},
                   started, inputs=list(args.attacks) + list(args.ckpt) + [args.data],
                   outputs=[os.path.relpath(p, args.out) for p in outputs])
    for row in report.rows:
        asr = row["asr"]
        print(f"{row['grid']:9s} {row['victim']:14s} {row['variant']:11s} {row['distance']:9s} "
              f"{row['budget']:<7g} {row['defense']:5s} ASR {'n/a' if asr is None else f'{asr:.3f}'}")
    return EXIT_OK


def cmd_check(args):
    started = _now()
    results = checks.run_checks(quick=args.quick)
    failed = [r for r in results if not r[1]]
    if args.json:
        print(json.dumps({"passed": not failed, "checks": [{"name": n, "passed": bool(ok), "detail": d}
                                                          for n, ok, d in results]}, indent=2))
    else:
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {name} {detail}")
        print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out:
        write_manifest(args.out, "check", args, {"quick": args.quick}, started)
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval,
            "check": cmd_check}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "config", None):
            sub = parser._subparsers._group_actions[0].choices[args.command]
            idx = argv.index(args.command)
            args = _apply_config(sub, args, argv[idx + 1:])
            args.command = argv[idx]
        missing = [f"--{name}" for name in REQUIRED.get(args.command, []) if getattr(args, name) in (None, "")]
        if missing:
            raise ConfigError(f"{args.command} needs {', '.join(missing)}")
        return COMMANDS[args.command](args)
    except (ConfigError, CapacityError, argparse.ArgumentTypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FileExistsError, ParseError, VersionError, DataError, OSError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
