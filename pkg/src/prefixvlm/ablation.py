"""Ablation harness: every arm is a config patch over one base run config.

Each arm pretrains (except ``no_pretraining``), is scored on caption exact
match per eval split, then finetuned on the configured downstream task.  Arms
whose resolved config equals an earlier arm's reuse that arm's results
(``conv_3`` is the full model), since runs are deterministic.
"""

from __future__ import annotations

import csv
import io
import json
import time
from pathlib import Path
from typing import Callable, Sequence

from . import pipeline as P
from .data import Corpora
from .model import ConfigError
from .plotting import plot_ablation, plot_training_curves
from .tokenizer import Vocab

ARMS: dict[str, dict] = {
    "full": {},
    "decoder_only": {"model": {"variant": "decoder_only"}},
    "w_lm": {"model": {"variant": "decoder_only"}, "train": {"objective": "lm"}},
    "w_span_corruption": {"train": {"objective": "span"}},
    "wo_image2text": {"train": {"pairs_per_batch": 0}},
    "wo_text2text": {"train": {"docs_per_batch": 0}},
    "wo_conv_stage": {"model": {"conv_blocks": 0}},
    "conv_2": {"model": {"conv_blocks": 2}},
    "conv_3": {"model": {"conv_blocks": 3}},
    "conv_4": {"model": {"conv_blocks": 4}},
    "no_pretraining": {"pretrain": False},
}

REPORT_METRICS = ("caption_em_heldin", "caption_em_compositional", "downstream_accuracy")
COLUMNS = ("arm", "pretrained", "params", *REPORT_METRICS, "final_loss_pair", "final_loss_text", "pretrain_seconds")


def arm_config(base: dict, arm: str) -> tuple[dict, bool]:
    """(resolved run config, whether to pretrain) for ``arm``."""
    if arm not in ARMS:
        raise ConfigError(f"unknown ablation arm {arm!r}; known: {sorted(ARMS)}")
    base = P.resolve_config(base)
    patch = dict(ARMS[arm])
    do_pretrain = patch.pop("pretrain", True)
    if patch.get("model", {}).get("variant") == "decoder_only" and base["model"]["variant"] != "decoder_only":
        # same depth as the encoder plus decoder it replaces
        patch["model"] = {**patch["model"], "layers_dec": base["model"]["layers_enc"] + base["model"]["layers_dec"]}
    return P.resolve_config(P.deep_update(base, patch)), do_pretrain


def _last(records: list[dict], key: str):
    vals = [r[key] for r in records if r.get(key) is not None]
    return vals[-1] if vals else None


def run_arm(cfg: dict, do_pretrain: bool, corpora: Corpora, vocab: Vocab, out_dir: Path | None = None) -> tuple[dict, list[dict]]:
    row: dict = {"pretrained": do_pretrain}
    records: list[dict] = []
    if do_pretrain:
        metrics = open(out_dir / "metrics.jsonl", "w", encoding="utf-8") if out_dir else None
        try:
            res = P.pretrain(cfg, corpora, vocab, metrics=metrics)
        finally:
            if metrics:
                metrics.close()
        model, records = res.model, res.records
        row["pretrain_seconds"] = round(res.seconds, 3)
    else:
        model = P.new_model(cfg, vocab)
        row["pretrain_seconds"] = 0.0
    row["params"] = model.num_parameters()
    captions = P.caption_eval(cfg, model, corpora, vocab) if do_pretrain else {}
    for split in ("heldin", "compositional"):
        row[f"caption_em_{split}"] = captions[split]["exact_match"] if split in captions else None
    down = P.finetune(cfg, model, vocab)
    row["downstream_accuracy"] = down["accuracy"]
    row["final_loss_pair"] = _last(records, "loss_pair")
    row["final_loss_text"] = _last(records, "loss_text")
    return row, records


def _fingerprint(cfg: dict, do_pretrain: bool) -> str:
    return json.dumps([cfg, do_pretrain], sort_keys=True)


def run_ablation(
    base: dict,
    arms: Sequence[str] | None = None,
    out_dir: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> dict:
    """Run ``arms`` (default: all) over one shared corpus and tokenizer; write the comparison report."""
    arms = list(arms or ARMS)
    resolved = {a: arm_config(base, a) for a in arms}  # fail fast on any bad arm
    base = P.resolve_config(base)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    corpora = P.make_corpora(base)
    vocab = P.make_tokenizer(base, corpora)
    rows: dict[str, dict] = {}
    curves: dict[str, list[dict]] = {}
    done: dict[str, str] = {}
    for arm in arms:
        cfg, do_pretrain = resolved[arm]
        key = _fingerprint(cfg, do_pretrain)
        t0 = time.perf_counter()
        if key in done:
            row = dict(rows[done[key]])
            row["same_as"] = done[key]
            curves[arm] = curves[done[key]]
        else:
            arm_dir = None
            if out:
                arm_dir = out / arm
                arm_dir.mkdir(exist_ok=True)
                P.save_json(arm_dir / "config.json", cfg)
            row, curves[arm] = run_arm(cfg, do_pretrain, corpora, vocab, arm_dir)
            done[key] = arm
        row["arm"] = arm
        rows[arm] = row
        if log:
            log(f"{arm}: " + ", ".join(f"{m}={row.get(m)}" for m in REPORT_METRICS) + f" ({time.perf_counter() - t0:.1f}s)")
    report = {"base_config": base, "arms": rows, "metrics": list(REPORT_METRICS)}
    if out:
        P.save_json(out / "report.json", report)
        (out / "report.tsv").write_text(report_table(rows))
        plot_ablation({a: {m: r.get(m) for m in REPORT_METRICS} for a, r in rows.items()}, REPORT_METRICS, out / "ablation.png")
        plot_training_curves({a: c for a, c in curves.items() if c}, out / "curves.png")
    return report


def report_table(rows: dict[str, dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows.values():
        w.writerow(["" if r.get(c) is None else (f"{r[c]:.4f}" if isinstance(r[c], float) else r[c]) for c in COLUMNS])
    return buf.getvalue()
