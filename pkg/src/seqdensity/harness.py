"""Experiment orchestration behind the command line.

Every ``cmd_*`` function reads its inputs, never modifies them, and writes
outputs that carry the experiment config hash and the suite version.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import shutil
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .config import SUITE_VERSION, ExperimentConfig, from_dict, save_config
from .data import (EOS, Splits, Vocab, dataset_meta, generate_dataset, load_dataset, save_dataset,
                   strip_eos)
from .errors import ConfigError, ConfigHashMismatch, DataError, MissingArtifactError
from .inference import beam_search, iterative_inference, sample_candidates, decode
from .models import build_model, count_params
from .training import TrainSchedule, TrainState, distill_dataset, train

log = logging.getLogger("seqdensity")


def _stamp(cfg: ExperimentConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), "task_hash": cfg.task_hash(),
            "suite_version": SUITE_VERSION, **extra}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _check_dataset(cfg: ExperimentConfig, data_dir: Path, want_distilled: bool | None = None
                   ) -> dict:
    if not (Path(data_dir) / "spec.json").exists():
        raise MissingArtifactError(f"no dataset at {data_dir}; run `seqdensity generate-data` "
                                   "(or `seqdensity distill`) first")
    meta = dataset_meta(data_dir)
    if meta.get("task_hash") != cfg.task_hash():
        raise ConfigHashMismatch(
            f"dataset {data_dir} was generated for task {meta.get('task_hash')}, but the config "
            f"describes task {cfg.task_hash()}; regenerate the data or fix the task section")
    if want_distilled is not None and bool(meta.get("distilled")) != want_distilled:
        kind = "distilled" if want_distilled else "raw"
        raise DataError(f"config asks for {kind} data but {data_dir} is not; "
                        + ("run `seqdensity distill` first" if want_distilled else
                           "point --data at the generate-data output"))
    return meta


# -- commands ----------------------------------------------------------------------
def cmd_generate_data(cfg: ExperimentConfig, out_dir: Path) -> Path:
    t = cfg.task
    splits = generate_dataset(t.spec(), t.n_train, t.n_dev, t.n_test)
    save_dataset(out_dir, splits, _stamp(cfg, distilled=False, producer="generate-data"))
    return Path(out_dir)


def _latest_checkpoint(out_dir: Path) -> Path | None:
    ckpts = sorted(Path(out_dir).glob("ckpt_*.npz"))
    return ckpts[-1] if ckpts else None


def cmd_train(cfg: ExperimentConfig, data_dir: Path, out_dir: Path, resume: bool = True
              ) -> Path:
    """Train, writing ``ckpt_<step>.npz``, ``train_log.jsonl`` and ``best.npz``."""
    meta = _check_dataset(cfg, data_dir, cfg.data == "distilled")
    splits = load_dataset(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.json")
    stamp = _stamp(cfg, dataset_hash=meta.get("config_hash"), data=cfg.data)
    model = build_model(cfg.model_config(), seed=cfg.seed)
    state = None
    latest = _latest_checkpoint(out_dir) if resume else None
    if latest is not None:
        model, state, header = load_checkpoint(latest, expect_hash=cfg.hash())
    elif (out_dir / "train_log.jsonl").exists():
        (out_dir / "train_log.jsonl").unlink()

    ckpt_meta = {**stamp, "vocab": list(splits.vocab.tokens)}

    def save(path, m, s):
        save_checkpoint(path, m, s, ckpt_meta)

    result = train(model, splits.train, splits.dev, cfg.schedule, seed=cfg.seed,
                   out_dir=out_dir, save_fn=save, state=state)
    best = out_dir / f"ckpt_{result.best_step:07d}.npz"
    if not best.exists():
        best = _latest_checkpoint(out_dir)
    if best is not None:
        shutil.copyfile(best, out_dir / "best.npz")
    _write_json(out_dir / "train_summary.json",
                {**stamp, "best_step": result.best_step, "stopped_early": result.stopped_early,
                 "final_step": result.state.step, "skipped_steps": result.state.skipped})
    return out_dir / "best.npz"


def cmd_distill(cfg: ExperimentConfig, teacher_ckpt: Path, data_dir: Path, out_dir: Path,
                beam_width: int | None = None) -> Path:
    _check_dataset(cfg, data_dir, False)
    teacher, _, header = load_checkpoint(teacher_ckpt)
    if header.get("task_hash") not in (None, cfg.task_hash()):
        raise ConfigHashMismatch(f"teacher {teacher_ckpt} was trained on task "
                                 f"{header.get('task_hash')}, not {cfg.task_hash()}")
    splits = load_dataset(data_dir)
    width = beam_width or cfg.inference.beam_width
    res = distill_dataset(teacher, splits.train, width)
    new = Splits(splits.spec, splits.vocab, res.pairs, splits.dev, splits.test)
    save_dataset(out_dir, new, _stamp(cfg, distilled=True, producer="distill",
                                      teacher_hash=header.get("config_hash"),
                                      teacher_failures=res.failures, beam_width=width))
    return Path(out_dir)


def _bleu(hyps, pairs) -> float:
    return metrics.bleu(hyps, [p.refs if p.refs else (p.content,) for p in pairs])


def evaluate_model(model, cfg: ExperimentConfig, pairs, seed: int = 0,
                   with_speed: bool = False, elbo_samples: int = 4) -> dict:
    """Test LL, BLEU (per k for LVMs), pairwise BLEU, pass counts and optional timing."""
    ev = cfg.evaluation
    ll = metrics.heldout_ll(model, pairs, ev.is_samples, seed)
    sources = [p.src for p in pairs]
    padded_ll, padded_se = ll.renormalized([p.padded_len for p in pairs])
    out = {"test_ll": ll.per_token, "test_ll_stderr": ll.stderr, "ll_samples": ll.samples,
           "ll_warnings": ll.warnings, "ll_padded": padded_ll, "ll_padded_stderr": padded_se}
    # diversity is measured on multi-reference sources when the task has them
    multi = [p for p in pairs if p.refs and len(p.refs) > 1]
    div_pairs = (multi or list(pairs))[: max(1, len(pairs) // 4)]
    div_sources = [p.src for p in div_pairs]
    if model.family == "ar":
        width = cfg.inference.beam_width
        model.counter.reset()
        hyps = [strip_eos(r.tokens) for r in beam_search(model, sources, width,
                                                         model.cfg.max_len)]
        out["test_bleu"] = _bleu(hyps, pairs)
        cands = sample_candidates(model, div_sources, ev.n_candidates, seed)
        out["pairwise_bleu"] = {"beam": _pairwise(cands)}
        out["short_beams"] = sum(c.short for c in cands)
        out["candidate_bleu"] = {"beam": _candidate_bleu(cands, div_pairs)}
        model.counter.reset()
        beam_search(model, sources[:1], 1, model.cfg.max_len)
        out["passes_per_sentence"] = float(model.counter.decoder_passes)
        out["refinement"] = None
    else:
        grid = {}
        for k in cfg.inference.k_list:
            res = iterative_inference(model, sources, k, cfg.inference.length_mode,
                                      [p.padded_len for p in pairs], elbo_samples, seed)
            elbos = [t.steps[-1].elbo for t in res.traces]
            grid[str(k)] = {"bleu": _bleu(res.tokens, pairs),
                            "elbo": float(np.mean(elbos)) if elbo_samples else None}
        out["refinement"] = grid
        report_k = "1" if "1" in grid else str(cfg.inference.k_list[0])
        out["test_bleu"] = grid[report_k]["bleu"]
        out["report_k"] = int(report_k)
        out["pairwise_bleu"] = {}
        out["candidate_bleu"] = {}
        for k in cfg.inference.k_list:
            cands = sample_candidates(model, div_sources, ev.n_candidates, seed, k,
                                      cfg.inference.length_mode, [p.padded_len for p in div_pairs])
            out["pairwise_bleu"][str(k)] = _pairwise(cands)
            out["candidate_bleu"][str(k)] = _candidate_bleu(cands, div_pairs)
        model.counter.reset()
        iterative_inference(model, sources[:1], 1, cfg.inference.length_mode,
                            [pairs[0].padded_len])
        out["passes_per_sentence"] = float(model.counter.decoder_passes)
    if with_speed:
        speed_src = sources[: ev.speed_sentences]
        rep = metrics.speed_benchmark(_speed_fn(cfg), model, speed_src, ev.speed_repetitions)
        out["speed"] = rep.to_dict()
    return out


def _pairwise(cands) -> float | None:
    # a beam can finish fewer than two hypotheses; such sources carry no diversity signal
    sets = [c.candidates for c in cands if len(c.candidates) >= 2]
    return metrics.pairwise_bleu(sets) if sets else None


def _candidate_bleu(cands, pairs) -> float:
    hyps, refs = [], []
    for c, p in zip(cands, pairs):
        for h in c.candidates:
            hyps.append(h)
            refs.append(p.refs if p.refs else (p.content,))
    return metrics.bleu(hyps, refs)


def _speed_fn(cfg: ExperimentConfig):
    width = cfg.inference.beam_width

    def run(model, srcs):
        if model.family == "ar":
            return beam_search(model, srcs, width, model.cfg.max_len)
        return iterative_inference(model, srcs, 1, "predicted")
    return run


def cmd_evaluate(cfg: ExperimentConfig, ckpt: Path, data_dir: Path, out_path: Path,
                 split: str = "test", with_speed: bool = False, model_id: str | None = None
                 ) -> metrics.ExperimentReport:
    """Write an ExperimentReport. Without ``with_speed`` the file is byte-reproducible."""
    model, _, header = load_checkpoint(ckpt)
    data_meta = _check_dataset(cfg, data_dir)
    if header.get("task_hash") not in (None, data_meta.get("task_hash")):
        raise ConfigHashMismatch(f"checkpoint {ckpt} was trained on task {header.get('task_hash')} "
                                 f"but {data_dir} holds task {data_meta.get('task_hash')}")
    if header.get("config_hash") not in (None, cfg.hash()):
        raise ConfigHashMismatch(f"checkpoint {ckpt} came from config {header.get('config_hash')}, "
                                 f"not {cfg.hash()}")
    pairs = getattr(load_dataset(data_dir), split)
    ev = evaluate_model(model, cfg, pairs, cfg.seed, with_speed)
    speed = ev.get("speed")
    report = metrics.ExperimentReport(
        model_id=model_id or cfg.model.size, family=model.family, data=cfg.data,
        test_ll=ev["test_ll"], test_ll_stderr=ev["test_ll_stderr"], test_bleu=ev["test_bleu"],
        pairwise_bleu=ev["pairwise_bleu"],
        sentences_per_second=speed["sentences_per_second"] if speed else None,
        passes_per_sentence=ev["passes_per_sentence"], param_count=count_params(model),
        config_hash=cfg.hash(), suite_version=SUITE_VERSION,
        extra={"refinement": ev["refinement"], "candidate_bleu": ev["candidate_bleu"],
               "ll_samples": ev["ll_samples"], "ll_warnings": ev["ll_warnings"],
               "split": split, "checkpoint_step": header.get("step"),
               "optimal_ll": _optimal_ll(cfg, pairs),
               "ll_padded": ev["ll_padded"], "ll_padded_stderr": ev["ll_padded_stderr"],
               "optimal_ll_padded": _optimal_ll(cfg, pairs, padded=True),
               "short_beams": ev.get("short_beams"), "speed": speed})
    _write_json(Path(out_path), report.to_dict())
    return report


def _optimal_ll(cfg: ExperimentConfig, pairs, padded: bool = False) -> float:
    from .data import optimal_token_ll
    return optimal_token_ll(cfg.task.spec(), pairs, padded)


def cmd_infer(ckpt: Path, input_path: Path, out_path: Path, k: int = 1, width: int = 4,
              length_mode: str = "predicted") -> int:
    """Decode one tokenised source per line; writes JSON lines."""
    model, _, header = load_checkpoint(ckpt)
    lines = [ln.split() for ln in Path(input_path).read_text().splitlines() if ln.strip()]
    vocab = Vocab(header["vocab"]) if "vocab" in header else None
    if vocab is None:
        raise MissingArtifactError(f"checkpoint {ckpt} has no vocabulary; retrain with this suite")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        for words in lines:
            unknown = [w for w in words if w not in vocab.index]
            if unknown:
                raise DataError(f"{input_path}: tokens not in the model vocabulary: {unknown[:5]}")
            src = vocab.encode(words)
            if not src or src[-1] != EOS:
                src = tuple(src) + (EOS,)       # training sources carry a closing EOS
            t0 = time.perf_counter()
            if model.family == "ar":
                r = beam_search(model, [src], width, model.cfg.max_len)[0]
                tokens, score, trace = strip_eos(r.tokens), r.score, None
            else:
                res = iterative_inference(model, [src], k, length_mode)
                tokens, trace = res.tokens[0], res.traces[0]
                score = trace.steps[-1].proxy
                trace = trace.summary()
            rec = {"source": " ".join(words), "tokens": list(tokens),
                   "text": vocab.detokenize(tokens), "score": score, "trace": trace,
                   "seconds": time.perf_counter() - t0, "config_hash": header.get("config_hash"),
                   "suite_version": SUITE_VERSION}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return len(lines)


# -- correlation and reports ----------------------------------------------------------------
def _load_reports(paths: Sequence[Path]) -> list[metrics.ExperimentReport]:
    out = []
    for p in paths:
        if not Path(p).exists():
            raise MissingArtifactError(f"no report at {p}; run `seqdensity evaluate` first")
        out.append(metrics.ExperimentReport.from_dict(json.loads(Path(p).read_text())))
    return out


def cmd_correlate(out_dir: Path, logs: Sequence[Path] = (), reports: Sequence[Path] = (),
                  grouping: str = "checkpoints") -> list[metrics.CorrelationRow]:
    """Correlation tables plus a scatter-data CSV (ll, bleu, model id, family)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list] = {}
    scatter = []
    if grouping == "checkpoints":
        for p in logs:
            p = Path(p)
            if not p.exists():
                raise MissingArtifactError(f"no training log at {p}; run `seqdensity train` first")
            name = p.parent.name
            pts = metrics.checkpoint_points(metrics.load_training_log(p))
            groups[name] = pts
            scatter += [(ll, b, f"{name}@{i}", name) for i, (ll, b) in enumerate(pts)]
    elif grouping == "models":
        reps = _load_reports(reports)
        for r in reps:
            groups.setdefault(r.data, []).append((r.test_ll, r.test_bleu))
            scatter.append((r.test_ll, r.test_bleu, r.model_id, r.family))
        groups["all"] = [(r.test_ll, r.test_bleu) for r in reps]
    else:
        raise ConfigError(f"unknown grouping {grouping!r}")
    rows = metrics.correlation_report(groups)
    for r in rows:
        if r.note:
            log.warning("group %s %s", r.group, r.note)
    _write_json(out_dir / "correlations.json", {"grouping": grouping,
                                               "suite_version": SUITE_VERSION,
                                               "rows": [asdict(r) for r in rows]})
    table = {r.group: {"pearson": r.pearson, "spearman": r.spearman} for r in rows}
    (out_dir / "correlations.tsv").write_text(
        metrics.format_correlation_table(table, ["pearson", "spearman"]))
    with open(out_dir / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ll", "bleu", "model_id", "family"])
        w.writerows(scatter)
    return rows


def _fmt(x, nd=2) -> str:
    return "-" if x is None else f"{x:.{nd}f}"


def cmd_report(out_dir: Path, reports: Sequence[Path] = (), table2: Path | None = None
               ) -> dict[str, Path]:
    """Summary tables (model grid, refinement grid, speed/size grid), correlation table
    and the quality-diversity figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    reps = _load_reports(reports)
    hashes = {r.suite_version for r in reps}
    if len(hashes) > 1:
        raise ConfigHashMismatch(f"reports come from different suite versions: {sorted(hashes)}")
    if reps:
        lines = ["model\tfamily\tdata\ttest_ll\ttest_bleu\tconfig_hash"]
        for r in reps:
            lines.append(f"{r.model_id}\t{r.family}\t{r.data}\t{_fmt(r.test_ll)}\t"
                         f"{_fmt(r.test_bleu)}\t{r.config_hash}")
        written["table1"] = out_dir / "table1.tsv"
        written["table1"].write_text("\n".join(lines) + "\n")
        ks = sorted({int(k) for r in reps for k in (r.extra.get("refinement") or {})})
        lines = ["model\tdata\tmetric\t" + "\t".join(str(k) for k in ks)]
        for r in reps:
            grid = r.extra.get("refinement")
            if not grid:
                continue
            for metric in ("bleu", "elbo"):
                cells = [_fmt(grid.get(str(k), {}).get(metric)) for k in ks]
                lines.append(f"{r.model_id}\t{r.data}\t{metric}\t" + "\t".join(cells))
        written["table4"] = out_dir / "table4.tsv"
        written["table4"].write_text("\n".join(lines) + "\n")
        lines = ["model\tdata\ttest_bleu\tsentences_per_second\tpasses_per_sentence\tparams"]
        for r in reps:
            lines.append(f"{r.model_id}\t{r.data}\t{_fmt(r.test_bleu)}\t"
                         f"{_fmt(r.sentences_per_second)}\t{_fmt(r.passes_per_sentence, 1)}\t"
                         f"{r.param_count}")
        written["table5"] = out_dir / "table5.tsv"
        written["table5"].write_text("\n".join(lines) + "\n")
        written.update(quality_diversity_figure(reps, out_dir))
    if table2 is not None:
        if not Path(table2).exists():
            raise MissingArtifactError(f"no correlation fixture at {table2}")
        tree = json.loads(Path(table2).read_text())
        cols = tree.get("columns")
        rows = {k: v for k, v in tree.items() if k != "columns"}
        written["table2"] = out_dir / "table2.tsv"
        written["table2"].write_text(metrics.format_correlation_table(rows, cols))
    return written


def quality_diversity_figure(reps, out_dir: Path) -> dict[str, Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "seqdensity"
    rows = []
    for r in reps:
        for k, pb in (r.pairwise_bleu or {}).items():
            q = (r.extra.get("candidate_bleu") or {}).get(k)
            if q is not None and pb is not None:
                rows.append((r.model_id, r.data, k, pb, q))
    csv_path = out_dir / "quality_diversity.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "data", "k", "pairwise_bleu", "bleu"])
        w.writerows(rows)
    fig, ax = plt.subplots(figsize=(5, 4))
    for name in sorted({(r[0], r[1]) for r in rows}):
        pts = [r for r in rows if (r[0], r[1]) == name]
        ax.plot([p[3] for p in pts], [p[4] for p in pts], marker="o", label=f"{name[0]} ({name[1]})")
        for p in pts:
            ax.annotate(str(p[2]), (p[3], p[4]), fontsize=7)
    ax.set_xlabel("pairwise BLEU (lower = more diverse)")
    ax.set_ylabel("BLEU")
    if rows:
        ax.legend(fontsize=7)
    svg = out_dir / "quality_diversity.svg"
    fig.savefig(svg, format="svg", metadata={"Date": None})
    plt.close(fig)
    return {"figure": svg, "figure_data": csv_path}


# -- experiment matrix -------------------------------------------------------------------------
def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "overrides":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _run_cell(name: str, tree: dict, data: Path, root: Path) -> dict:
    from filelock import FileLock

    cfg = from_dict(tree)
    cell = root / "cells" / f"{name}-{cfg.hash()}"
    cell.mkdir(parents=True, exist_ok=True)
    done = cell / "DONE"
    with FileLock(str(cell) + ".lock"):
        if done.exists() and done.read_text().strip() == cfg.hash():
            log.info("skip %s (complete)", name)
            return {"name": name, "dir": str(cell), "skipped": True}
        ckpt = cmd_train(cfg, data, cell / "train")
        cmd_evaluate(cfg, ckpt, data, cell / "report.json", model_id=name)
        done.write_text(cfg.hash() + "\n")
    return {"name": name, "dir": str(cell), "skipped": False}


def cmd_matrix(manifest_path: Path, root: Path, jobs: int = 1) -> list[dict]:
    """Run every cell of a family x {raw, distilled} grid; completed cells are skipped.

    Manifest: {"base": <config tree>, "teacher": <overrides>, "cells": [{"name": ...,
    "overrides": {...}}, ...]}. Cells with ``"data": "distilled"`` train on data
    distilled by the teacher cell. With ``jobs > 1`` the cells run in parallel
    processes; each cell directory is guarded by its own lock file.
    """
    from filelock import FileLock

    if not Path(manifest_path).exists():
        raise MissingArtifactError(f"no manifest at {manifest_path}")
    manifest = json.loads(Path(manifest_path).read_text())
    unknown = set(manifest) - {"base", "teacher", "cells"}
    if unknown:
        raise ConfigError(f"manifest: unknown keys {sorted(unknown)}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    base = manifest.get("base", {})
    base_cfg = from_dict(base)
    data_dir = root / f"data-{base_cfg.task_hash()}"
    with FileLock(str(root / "data.lock")):
        if not (data_dir / "spec.json").exists():
            cmd_generate_data(base_cfg, data_dir)
    summary = []
    cells = manifest.get("cells", [])
    needs_teacher = any(c.get("overrides", {}).get("data") == "distilled" for c in cells)
    if needs_teacher:
        t_tree = _merge(base, manifest.get("teacher", {"model": {"size": "ar-small"}}))
        t_tree["data"] = "raw"
        info = _run_cell("teacher", t_tree, data_dir, root)
        summary.append(info)
        teacher_ckpt = Path(info["dir"]) / "train" / "best.npz"
        t_cfg = from_dict(t_tree)
        dist_dir = root / f"distilled-{t_cfg.hash()}"
        with FileLock(str(root / "distill.lock")):
            if not (dist_dir / "spec.json").exists():
                cmd_distill(t_cfg, teacher_ckpt, data_dir, dist_dir)
    work = []
    for c in cells:
        tree = _merge(base, c.get("overrides", {}))
        data = data_dir if tree.get("data", "raw") == "raw" else dist_dir
        work.append((c["name"], tree, data, root))
    if jobs > 1 and len(work) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summary.extend(pool.map(_run_cell, *zip(*work)))
    else:
        summary.extend(_run_cell(*w) for w in work)
    reports = [Path(s["dir"]) / "report.json" for s in summary]
    cmd_report(root / "report", reports)
    _write_json(root / "matrix_summary.json", {"cells": summary, "suite_version": SUITE_VERSION})
    return summary
