"""Pipeline command line: pretrain -> attack -> defend / detect -> evaluate -> report.

Every stage reads and writes one run directory, so stages can be rerun or
mixed freely:

    runs/<run_id>/
      config.json              resolved configuration (config.toml kept verbatim)
      splits.json              sample ids per split
      pretrained.ckpt          clean contrastive model
      trigger_<attack>.trig    trigger patch/pattern
      poison_manifest_<attack>.json
      poisoned_<attack>.ckpt   model finetuned on the poisoned pool
      defended_<attack>_<defense>.ckpt
      detection_<name>.json/.npz
      results.csv              one row per evaluation
      sweep.csv                one row per sweep point
      runlog.jsonl             append-only stage log
      report.md                rendered summary

On success each command prints a one-line JSON payload; on failure it prints
a JSON error object to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .artifacts import load_checkpoint, model_hash, save_checkpoint
from .config import (ExperimentConfig, config_from_dict, desk_default_config,
                     load_config)
from .data import Corpus, CorpusSplit, generate_corpus, split_corpus
from .defenses import (abl_isolate, abl_remove_and_finetune, defense_cleanclip,
                       defense_finetune, detect_decree)
from .evaluation import (EvalReport, append_result_row, eval_linear_probe,
                         eval_zero_shot, read_results)
from .model import EncoderPair, build_model, fit_contrastive
from .poison import (build_poisoned_dataset, poison_train, rank_candidates,
                     select_poison_ids)
from .report import plot_image_grid, render_report
from .runlog import RunRecord, append_record
from .triggers import (TriggerPatch, load_trigger, make_blend_pattern,
                       make_fixed_patch, optimize_trigger, save_trigger,
                       default_position)

ATTACKS = ("badclip", "fixed_patch", "blended")
DEFENSES = ("finetune", "cleanclip", "abl")


class CliError(RuntimeError):
    """User-facing pipeline error with a machine-readable payload."""

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _fail(err: Exception) -> int:
    body = {"error": type(err).__name__, "message": str(err)}
    if isinstance(err, CliError):
        body.update(err.details)
    print(json.dumps(body, sort_keys=True), file=sys.stderr)
    return 1


# ---------------------------------------------------------------- run state


def _materialize(cfg: ExperimentConfig) -> tuple[Corpus, CorpusSplit]:
    corpus = generate_corpus(cfg.corpus)
    split = split_corpus(corpus, cfg.split.as_tuple(), cfg.stage_seed("split"))
    return corpus, split


def _split_ids(split: CorpusSplit) -> dict[str, list[int]]:
    return {name: part.ids.tolist() for name, part in split.parts().items()}


def _load_run(run_dir: str | Path) -> tuple[Path, ExperimentConfig, CorpusSplit]:
    run = Path(run_dir)
    cfg_path = run / "config.json"
    if not cfg_path.exists():
        raise CliError(f"no run found at {run} (missing config.json); "
                       "run the pretrain command first", run_dir=str(run))
    cfg = config_from_dict(json.loads(cfg_path.read_text()))
    _, split = _materialize(cfg)
    stored = json.loads((run / "splits.json").read_text())
    if stored != _split_ids(split):
        raise CliError("regenerated splits do not match splits.json; the run "
                       "directory was produced by a different config",
                       run_dir=str(run))
    return run, cfg, split


def _results_path(run: Path) -> Path:
    return run / "results.csv"


def _log(run: Path, cfg: ExperimentConfig, stage: str, seed: int,
         artifacts: dict, metrics: dict) -> None:
    append_record(run / "runlog.jsonl", RunRecord(
        run_id=cfg.run_id, stage=stage, seed=seed,
        config=cfg.to_dict(), artifacts=artifacts, metrics=metrics))


def _report_metrics(report: EvalReport) -> dict:
    return {"task": report.task,
            "clean_accuracy": report.clean_accuracy,
            "attack_success_rate": report.attack_success_rate}


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> dict:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = desk_default_config()
    if args.run_id:
        cfg = replace(cfg, run_id=args.run_id)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)

    run = Path(cfg.out_dir) / cfg.run_id
    run.mkdir(parents=True, exist_ok=True)
    if args.config:
        shutil.copyfile(args.config, run / "config.toml")
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    t0 = time.monotonic()
    _, split = _materialize(cfg)
    (run / "splits.json").write_text(json.dumps(_split_ids(split)))

    pair = build_model(cfg.model, cfg.stage_seed("model_init"))
    train_cfg = replace(cfg.pretrain, seed=cfg.stage_seed("pretrain"))
    trace = fit_contrastive(pair, split.pretrain.pixels, split.pretrain.tokens, train_cfg)
    ckpt_hash = save_checkpoint(pair, run / "pretrained.ckpt")

    report = eval_zero_shot(pair, split.eval_clean,
                            forbidden_ids=split.pretrain.ids.tolist())
    append_result_row(_results_path(run), run_id=cfg.run_id, stage="pretrain",
                      attack="none", defense="none", report=report,
                      seed=cfg.master_seed)
    _log(run, cfg, "pretrain", train_cfg.seed,
         {"pretrained.ckpt": ckpt_hash},
         {**_report_metrics(report), "final_loss": trace[-1]["loss"],
          "seconds": time.monotonic() - t0})
    return {"run_dir": str(run), "clean_accuracy": report.clean_accuracy,
            "final_loss": trace[-1]["loss"], "checkpoint": str(run / "pretrained.ckpt")}


def _build_attack_trigger(attack: str, cfg: ExperimentConfig, pair: EncoderPair,
                          pool: Corpus) -> tuple[TriggerPatch, list[dict]]:
    image_size = cfg.corpus.image_size
    tcfg = replace(cfg.attack.trigger, seed=cfg.stage_seed("trigger"))
    if attack == "badclip":
        return optimize_trigger(pair, pool, cfg.attack.target_label, tcfg)
    if attack == "fixed_patch":
        pos = tcfg.position or default_position(image_size, tcfg.patch_size)
        return TriggerPatch(make_fixed_patch(tcfg.patch_size), pos,
                            kind="fixed_pattern"), []
    if attack == "blended":
        pattern = make_blend_pattern(image_size, tcfg.seed)
        return TriggerPatch(pattern, (0, 0), kind="blended",
                            blend_alpha=cfg.attack.blend_alpha), []
    raise CliError(f"unknown attack {attack!r}", choices=list(ATTACKS))


def cmd_attack(args) -> dict:
    run, cfg, split = _load_run(args.run_dir)
    pair = load_checkpoint(run / "pretrained.ckpt")
    pool = split.attacker_pool
    target = cfg.attack.target_label
    t0 = time.monotonic()

    trigger, opt_trace = _build_attack_trigger(args.attack, cfg, pair, pool)
    trig_path = run / f"trigger_{args.attack}.trig"
    trig_hash = save_trigger(
        trigger, trig_path, victim_hash=model_hash(pair),
        opt_config=cfg.attack.trigger if args.attack == "badclip" else None,
        target_label=target)

    ranking = rank_candidates(pair, pool, target, seed=cfg.stage_seed("selection"))
    count = args.poison_count or max(1, round(cfg.attack.poison_rate * len(pool)))
    selection = select_poison_ids(ranking, count, mode=args.selection)
    poisoned, manifest = build_poisoned_dataset(
        pool, trigger, target, selection, seed=cfg.stage_seed("captions"))
    (run / f"poison_manifest_{args.attack}.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))

    victim = pair.clone()
    train_cfg = replace(cfg.attack.train, seed=cfg.stage_seed("poison_train"))
    trace = poison_train(victim, poisoned, train_cfg)
    ckpt_path = run / f"poisoned_{args.attack}.ckpt"
    ckpt_hash = save_checkpoint(victim, ckpt_path)

    report = eval_zero_shot(victim, split.eval_clean, trigger=trigger,
                            target_label=target, forbidden_ids=pool.ids.tolist())
    append_result_row(_results_path(run), run_id=cfg.run_id, stage="attack",
                      attack=args.attack, defense="none", report=report,
                      seed=cfg.master_seed)
    _log(run, cfg, f"attack:{args.attack}", train_cfg.seed,
         {trig_path.name: trig_hash, ckpt_path.name: ckpt_hash},
         {**_report_metrics(report), "poison_count": count,
          "final_loss": trace[-1]["loss"],
          "trigger_final_loss": opt_trace[-1]["loss_total"] if opt_trace else None,
          "seconds": time.monotonic() - t0})
    return {"run_dir": str(run), "attack": args.attack, "poison_count": count,
            "clean_accuracy": report.clean_accuracy,
            "attack_success_rate": report.attack_success_rate,
            "checkpoint": str(ckpt_path)}


def _rebuild_poisoned(run: Path, cfg: ExperimentConfig, split: CorpusSplit,
                      attack: str) -> tuple[Corpus, dict, TriggerPatch]:
    manifest_path = run / f"poison_manifest_{attack}.json"
    if not manifest_path.exists():
        raise CliError(f"no {attack} attack found in this run; run the attack "
                       "command first", missing=str(manifest_path))
    manifest = json.loads(manifest_path.read_text())
    trigger, _ = load_trigger(run / f"trigger_{attack}.trig")
    selection = {int(row["id"]): row["strategy"] for row in manifest["rows"]}
    poisoned, rebuilt = build_poisoned_dataset(
        split.attacker_pool, trigger, manifest["target_label"], selection,
        seed=manifest["seed"])
    if rebuilt["rows"] != manifest["rows"]:
        raise CliError("stored poison manifest does not match the rebuilt "
                       "dataset; run directory is inconsistent")
    return poisoned, manifest, trigger


def cmd_defend(args) -> dict:
    run, cfg, split = _load_run(args.run_dir)
    ckpt_path = run / f"poisoned_{args.attack}.ckpt"
    if not ckpt_path.exists():
        raise CliError(f"missing {ckpt_path.name}; run the attack command first",
                       missing=str(ckpt_path))
    victim = load_checkpoint(ckpt_path)
    trigger, _ = load_trigger(run / f"trigger_{args.attack}.trig")
    target = cfg.attack.target_label
    t0 = time.monotonic()
    extra: dict = {}

    if args.defense == "finetune":
        fcfg = replace(cfg.defenses.finetune, seed=cfg.stage_seed("defense_finetune"))
        defended, trace = defense_finetune(victim, split.defender_clean, fcfg)
    elif args.defense == "cleanclip":
        ccfg = replace(cfg.defenses.cleanclip, seed=cfg.stage_seed("defense_cleanclip"))
        defended, trace = defense_cleanclip(victim, split.defender_clean, ccfg)
    elif args.defense == "abl":
        poisoned, manifest, _ = _rebuild_poisoned(run, cfg, split, args.attack)
        acfg = replace(cfg.defenses.abl, seed=cfg.stage_seed("defense_abl"))
        # isolation warm-starts from the base checkpoint the victim was
        # trained from, where shortcut pairs still show their fast loss drop
        base = load_checkpoint(run / "pretrained.ckpt")
        flagged, losses = abl_isolate(base, poisoned, acfg)
        true_ids = {row["id"] for row in manifest["rows"]}
        recall = len(true_ids & set(flagged)) / len(true_ids)
        (run / f"abl_isolation_{args.attack}.json").write_text(json.dumps(
            {"flagged": flagged, "recall": recall,
             "true_poison_ids": sorted(true_ids)}, indent=2))
        fcfg = replace(cfg.defenses.finetune, seed=cfg.stage_seed("defense_abl_ft"))
        defended, trace = abl_remove_and_finetune(victim, poisoned, flagged, fcfg)
        extra["isolation_recall"] = recall
    else:
        raise CliError(f"unknown defense {args.defense!r}", choices=list(DEFENSES))

    out_path = run / f"defended_{args.attack}_{args.defense}.ckpt"
    ckpt_hash = save_checkpoint(defended, out_path)
    report = eval_zero_shot(defended, split.eval_clean, trigger=trigger,
                            target_label=target,
                            forbidden_ids=split.defender_clean.ids.tolist())
    append_result_row(_results_path(run), run_id=cfg.run_id, stage="defend",
                      attack=args.attack, defense=args.defense, report=report,
                      seed=cfg.master_seed)
    _log(run, cfg, f"defend:{args.attack}:{args.defense}",
         cfg.stage_seed(f"defense_{args.defense}"),
         {out_path.name: ckpt_hash},
         {**_report_metrics(report), **extra, "final_loss": trace[-1]["loss"],
          "seconds": time.monotonic() - t0})
    return {"run_dir": str(run), "attack": args.attack, "defense": args.defense,
            "clean_accuracy": report.clean_accuracy,
            "attack_success_rate": report.attack_success_rate,
            **extra, "checkpoint": str(out_path)}


def _checkpoint_for(run: Path, attack: str, defense: str) -> Path:
    if attack == "none":
        return run / "pretrained.ckpt"
    if defense == "none":
        return run / f"poisoned_{attack}.ckpt"
    return run / f"defended_{attack}_{defense}.ckpt"


def cmd_evaluate(args) -> dict:
    run, cfg, split = _load_run(args.run_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint \
        else _checkpoint_for(run, args.attack, args.defense)
    if not ckpt.exists():
        raise CliError(f"checkpoint {ckpt} not found", missing=str(ckpt))
    pair = load_checkpoint(ckpt)
    trigger = None
    if args.attack != "none":
        trigger, _ = load_trigger(run / f"trigger_{args.attack}.trig")
    target = cfg.attack.target_label
    tasks = ("zero_shot", "linear_probe") if args.task == "both" else (args.task,)

    payload: dict = {"run_dir": str(run), "attack": args.attack,
                     "defense": args.defense, "checkpoint": str(ckpt)}
    for task in tasks:
        if task == "zero_shot":
            report = eval_zero_shot(pair, split.eval_clean, trigger=trigger,
                                    target_label=target if trigger else None)
        else:
            report = eval_linear_probe(pair, split.defender_clean, split.eval_clean,
                                       trigger=trigger,
                                       target_label=target if trigger else None,
                                       cfg=cfg.probe)
        append_result_row(_results_path(run), run_id=cfg.run_id, stage="evaluate",
                          attack=args.attack, defense=args.defense, report=report,
                          seed=cfg.master_seed)
        payload[task] = _report_metrics(report)
    _log(run, cfg, "evaluate", cfg.master_seed, {"checkpoint": str(ckpt)},
         {k: v for k, v in payload.items() if k in tasks})
    return payload


def cmd_detect(args) -> dict:
    run, cfg, split = _load_run(args.run_dir)
    targets: list[tuple[str, Path]] = []
    if args.checkpoint:
        targets.append((args.model_name or Path(args.checkpoint).stem,
                        Path(args.checkpoint)))
    else:
        targets.append(("pretrained", run / "pretrained.ckpt"))
        poisoned = run / f"poisoned_{args.attack}.ckpt"
        if poisoned.exists():
            targets.append((f"poisoned_{args.attack}", poisoned))

    dcfg = replace(cfg.defenses.decree, seed=cfg.stage_seed("detect"))
    verdicts = {}
    for name, path in targets:
        if not path.exists():
            raise CliError(f"checkpoint {path} not found", missing=str(path))
        pair = load_checkpoint(path)
        rep = detect_decree(pair, split.defender_clean, dcfg)
        (run / f"detection_{name}.json").write_text(json.dumps({
            "model": name, "l1_norm": rep.l1_norm, "pl1_norm": rep.pl1_norm,
            "consistency": rep.consistency, "dispersion": rep.dispersion,
            "verdict": rep.verdict, "threshold": rep.threshold,
            "trace": rep.trace}, indent=2, sort_keys=True))
        np.savez(run / f"detection_{name}.npz",
                 mask=rep.inverted_mask.numpy(),
                 pattern=rep.inverted_pattern.numpy())
        verdicts[name] = {"verdict": rep.verdict, "pl1_norm": rep.pl1_norm,
                          "dispersion": rep.dispersion}
        _log(run, cfg, f"detect:{name}", dcfg.seed, {str(path.name): ""},
             verdicts[name])
    return {"run_dir": str(run), "detections": verdicts}


def cmd_report(args) -> dict:
    run, cfg, _ = _load_run(args.run_dir)
    results_rows = read_results(_results_path(run)) if _results_path(run).exists() else []
    sweep_path = run / "sweep.csv"
    sweep_rows = []
    if sweep_path.exists():
        import csv
        with sweep_path.open(newline="") as fh:
            sweep_rows = list(csv.DictReader(fh))
    detection_rows = [json.loads(p.read_text())
                      for p in sorted(run.glob("detection_*.json"))]
    report_path = render_report(results_rows, run, sweep_rows=sweep_rows,
                                detection_rows=detection_rows)

    figures = []
    for npz_path in sorted(run.glob("detection_*.npz")):
        data = np.load(npz_path)
        name = npz_path.stem
        fig = run / f"{name}.png"
        plot_image_grid([torch.from_numpy(data["mask"]),
                         torch.from_numpy(data["pattern"])],
                        [f"{name} mask", f"{name} pattern"], fig)
        figures.append(str(fig))
    return {"run_dir": str(run), "report": str(report_path), "figures": figures}


def _append_sweep_row(path: Path, sweep: str, value, attack: str,
                      report: EvalReport, seed: int) -> None:
    import csv
    from datetime import datetime, timezone
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["sweep", "value", "attack", "clean_accuracy",
                             "attack_success_rate", "seed", "timestamp"])
        writer.writerow([sweep, value, attack, f"{report.clean_accuracy:.6f}",
                         "" if report.attack_success_rate is None
                         else f"{report.attack_success_rate:.6f}",
                         seed, datetime.now(timezone.utc).isoformat()])


def _sweep_attack_once(cfg: ExperimentConfig, split: CorpusSplit,
                       pair: EncoderPair, trigger: TriggerPatch,
                       count: int, mode: str) -> EvalReport:
    target = cfg.attack.target_label
    ranking = rank_candidates(pair, split.attacker_pool, target,
                              seed=cfg.stage_seed("selection"))
    selection = select_poison_ids(ranking, count, mode=mode)
    poisoned, _ = build_poisoned_dataset(split.attacker_pool, trigger, target,
                                         selection, seed=cfg.stage_seed("captions"))
    victim = pair.clone()
    poison_train(victim, poisoned,
                 replace(cfg.attack.train, seed=cfg.stage_seed("poison_train")))
    return eval_zero_shot(victim, split.eval_clean, trigger=trigger,
                          target_label=target)


def cmd_sweep(args) -> dict:
    run, cfg, split = _load_run(args.run_dir)
    pair = load_checkpoint(run / "pretrained.ckpt")
    pool = split.attacker_pool
    target = cfg.attack.target_label
    scale = args.epochs_scale
    base_count = max(1, round(cfg.attack.poison_rate * len(pool)))
    tcfg = replace(cfg.attack.trigger, seed=cfg.stage_seed("trigger"),
                   epochs=max(1, int(cfg.attack.trigger.epochs * scale)))
    sweep_path = run / "sweep.csv"
    rows = []

    if args.sweep == "objective":
        variants = {"full": {}, "lt_only": {"hinge_weight": 0.0},
                    "lv_only": {"text_weight": 0.0}}
        for vname, over in variants.items():
            trigger, _ = optimize_trigger(pair, pool, target, replace(tcfg, **over))
            for mode in ("stratified", "random"):
                report = _sweep_attack_once(cfg, split, pair, trigger,
                                            base_count, mode)
                value = f"{vname}+{'pps' if mode == 'stratified' else 'random'}"
                _append_sweep_row(sweep_path, "objective", value, "badclip",
                                  report, cfg.master_seed)
                rows.append({"value": value,
                             "attack_success_rate": report.attack_success_rate})
    elif args.sweep == "poison_count":
        trig_path = run / "trigger_badclip.trig"
        if trig_path.exists():
            trigger, _ = load_trigger(trig_path)
        else:
            trigger, _ = optimize_trigger(pair, pool, target, tcfg)
        for count in args.values or [4, 8, base_count, 2 * base_count]:
            report = _sweep_attack_once(cfg, split, pair, trigger, int(count),
                                        "stratified")
            _append_sweep_row(sweep_path, "poison_count", int(count), "badclip",
                              report, cfg.master_seed)
            rows.append({"value": int(count),
                         "attack_success_rate": report.attack_success_rate})
    elif args.sweep == "patch_size":
        for size in args.values or [8, 12, 16]:
            scfg = replace(tcfg, patch_size=int(size), position=None)
            trigger, _ = optimize_trigger(pair, pool, target, scfg)
            report = _sweep_attack_once(cfg, split, pair, trigger, base_count,
                                        "stratified")
            _append_sweep_row(sweep_path, "patch_size", int(size), "badclip",
                              report, cfg.master_seed)
            rows.append({"value": int(size),
                         "attack_success_rate": report.attack_success_rate})
    else:
        raise CliError(f"unknown sweep {args.sweep!r}",
                       choices=["objective", "poison_count", "patch_size"])

    _log(run, cfg, f"sweep:{args.sweep}", cfg.master_seed,
         {"sweep.csv": ""}, {"rows": rows})
    return {"run_dir": str(run), "sweep": args.sweep, "rows": rows,
            "sweep_file": str(sweep_path)}


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mclab",
        description="Backdoor poisoning lab for contrastive image-text models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="generate data and train the clean model")
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--run-id", help="run directory name")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="parent directory for runs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("attack", help="optimize a trigger and poison the model")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--attack", choices=ATTACKS, default="badclip")
    p.add_argument("--selection", choices=("stratified", "random"),
                   default="stratified", help="poison pair selection mode")
    p.add_argument("--poison-count", type=int,
                   help="override the poison budget (default: rate from config)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="run a defense against a poisoned model")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--attack", choices=ATTACKS, default="badclip")
    p.add_argument("--defense", choices=DEFENSES, required=True)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("evaluate", help="score a checkpoint (CA and ASR)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--attack", default="badclip",
                   choices=ATTACKS + ("none",))
    p.add_argument("--defense", default="none", choices=DEFENSES + ("none",))
    p.add_argument("--checkpoint", help="explicit checkpoint path")
    p.add_argument("--task", choices=("zero_shot", "linear_probe", "both"),
                   default="zero_shot")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("detect", help="trigger-inversion backdoor scan")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--attack", choices=ATTACKS, default="badclip")
    p.add_argument("--checkpoint", help="scan this checkpoint instead")
    p.add_argument("--model-name", help="label for --checkpoint outputs")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="render report.md from run artifacts")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="small parameter sweeps around the attack")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--sweep", required=True,
                   choices=("objective", "poison_count", "patch_size"))
    p.add_argument("--values", type=float, nargs="*",
                   help="sweep points (poison_count / patch_size)")
    p.add_argument("--epochs-scale", type=float, default=0.5,
                   help="scale factor on trigger epochs for sweep economy")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    args = build_parser().parse_args(argv)
    try:
        payload = args.func(args)
    except Exception as err:  # argparse exits on its own for usage errors
        return _fail(err)
    _emit(payload)
    return 0


if __name__ == "__main__":
    sys.exit(main())
