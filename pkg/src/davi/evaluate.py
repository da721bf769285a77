"""Metrics, ensembling and the dual-vs-single interaction ablation."""

from __future__ import annotations

import json
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import VOCAB, Sample, batch_arrays, detokenize
from .model import ModelConfig, ModelParams, baseline_forward, davi_forward, ld_greedy

MASK_THRESHOLD = 0.5


class ConfigMismatch(ValueError):
    pass


def iou(pred, gt) -> float:
    """|A∩B| / |A∪B| of two boolean masks; two empty masks score 1.0."""
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"iou shape mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass
class Prediction:
    answer: str | None
    mask: np.ndarray
    logprob: float = 0.0


@dataclass
class EvalReport:
    mean_iou: float
    answer_accuracy: float | None
    records: list[dict]
    models: list[str]
    ensemble: bool

    @classmethod
    def from_records(cls, records, models, ensemble) -> EvalReport:
        ious = [r["iou"] for r in records]
        mean_iou = 100.0 * float(np.mean(ious)) if ious else 0.0
        flags = [r["answer_correct"] for r in records if r.get("answer_correct") is not None]
        acc = 100.0 * sum(flags) / len(flags) if flags else None
        return cls(mean_iou, acc, list(records), list(models), ensemble)

    def summary(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "answer_accuracy": self.answer_accuracy,
            "n": len(self.records),
            "models": self.models,
            "ensemble": self.ensemble,
        }

    def table(self) -> str:
        acc = "n/a" if self.answer_accuracy is None else f"{self.answer_accuracy:.2f}"
        kind = "ensemble" if self.ensemble else "single"
        return (
            f"models      {', '.join(self.models)} ({kind})\n"
            f"samples     {len(self.records)}\n"
            f"IoU (%)     {self.mean_iou:.2f}\n"
            f"answer (%)  {acc}\n"
        )

    def write(self, out_dir, stem: str = "eval") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{stem}.jsonl", "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"summary": self.summary()}) + "\n")
            for r in self.records:
                fh.write(json.dumps(r) + "\n")
        (out / f"{stem}.txt").write_text(self.table(), encoding="utf-8")


# ---------------------------------------------------------------------------
# prediction


def _model_outputs(params: ModelParams, images, q_ids, q_valid):
    """Mask probabilities and (for the dual model) greedy answers with log-probs.

    Any object with a ``predict(images, q_ids, q_valid)`` method returning the
    same triple can stand in for a parameter set (used for oracle stubs).
    """
    if hasattr(params, "predict"):
        return params.predict(images, q_ids, q_valid)
    with T.no_grad():
        if params.kind == "davi":
            out = davi_forward(params, images, q_ids, q_valid)
            probs = T._sigmoid(out.mask_logits.data.astype(np.float64))
            seqs, logp = ld_greedy(params, out.evidence, VOCAB.bos, VOCAB.eos)
            answers = [detokenize(s) for s in seqs]
            return probs, answers, np.asarray(logp, dtype=float)
        logits = baseline_forward(params, images, q_ids, q_valid)
        probs = T._sigmoid(logits.data.astype(np.float64))
        return probs, None, None


def _check_configs(models: list[ModelParams]) -> None:
    if not models:
        raise ValueError("need at least one model")
    ref = models[0].config
    for m in models[1:]:
        if m.config != ref:
            raise ConfigMismatch("checkpoints disagree on ModelConfig")


def _vote(answers: list[str], logps: list[float]) -> str:
    """Majority vote; ties go to the answer with highest mean sequence log-prob."""
    counts = Counter(answers)
    top = max(counts.values())
    tied = sorted(a for a, c in counts.items() if c == top)
    if len(tied) == 1:
        return tied[0]

    def mean_lp(a):
        return float(np.mean([lp for ans, lp in zip(answers, logps) if ans == a]))

    return max(tied, key=lambda a: (mean_lp(a), a))


def predict_batch(models: list[ModelParams], images, q_ids, q_valid) -> list[Prediction]:
    """Per-sample predictions; several models are combined as an ensemble.

    Pixel is on when the mean of the per-model probabilities is ≥ 0.5. The
    probabilities are summed in sorted order so model order cannot matter.
    """
    _check_configs(models)
    outs = [_model_outputs(m, images, q_ids, q_valid) for m in models]
    k = len(models)
    if k == 1:
        masks = outs[0][0] >= MASK_THRESHOLD
    else:
        stacked = np.sort(np.stack([o[0] for o in outs]), axis=0)
        masks = stacked.sum(axis=0) >= MASK_THRESHOLD * k
    preds = []
    for i in range(masks.shape[0]):
        voters = [(o[1][i], float(o[2][i])) for o in outs if o[1] is not None]
        if not voters:
            preds.append(Prediction(None, masks[i]))
            continue
        answer = _vote([a for a, _ in voters], [lp for _, lp in voters])
        lp = float(np.mean([l for a, l in voters if a == answer]))
        preds.append(Prediction(answer, masks[i], lp))
    return preds


def _as_params(models) -> list[ModelParams]:
    return [m.params("ema") if isinstance(m, Checkpoint) else m for m in models]


def ensemble_predict(checkpoints, image, question: str | np.ndarray) -> Prediction:
    """Combined (answer, mask) for one image and question across checkpoints."""
    from .data import tokenize

    models = _as_params(checkpoints)
    _check_configs(models)
    cfg = models[0].config
    if isinstance(question, str):
        ids = np.array([tokenize(question, cfg.max_question_len).ids])
    else:
        ids = np.asarray(question)[None]
    image = np.asarray(image)[None]
    return predict_batch(models, image, ids, ids != VOCAB.pad)[0]


def evaluate_params(models, samples: list[Sample], batch_size: int = 50) -> EvalReport:
    models = _as_params(models)
    _check_configs(models)
    cfg = models[0].config
    records = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images, q_ids, q_valid, _, _ = batch_arrays(chunk, cfg.max_question_len, cfg.max_answer_len)
        for s, p in zip(chunk, predict_batch(models, images, q_ids, q_valid)):
            rec = {"id": s.id, "iou": iou(p.mask, s.mask)}
            rec["answer_correct"] = None if p.answer is None else p.answer == s.answer
            if p.answer is not None:
                rec["answer"] = p.answer
            records.append(rec)
    names = [f"{getattr(m, 'kind', type(m).__name__)}#{i}" for i, m in enumerate(models)]
    return EvalReport.from_records(records, names, ensemble=len(models) > 1)


def evaluate(checkpoints: list[Checkpoint], samples: list[Sample], names: list[str] | None = None) -> EvalReport:
    rep = evaluate_params(checkpoints, samples)
    if names:
        rep.models = list(names)
    return rep


# ---------------------------------------------------------------------------
# ablation

ABLATION_COLUMNS = ("variant", "iou_mean", "iou_std", "delta", "delta_prev", "answer_acc", "n_models")
VARIANTS = (
    "LE + LVE + VD (w/o answer)",
    "VE+VLE+LVD+LD",
    "VE+VLE+LVD+LD (w/ ensemble)",
)


@dataclass
class AblationRow:
    variant: str
    iou_mean: float
    iou_std: float
    delta: float | None  # vs the baseline row
    delta_prev: float | None  # vs the row above
    answer_acc: float | None
    n_models: int


@dataclass
class AblationResult:
    rows: list[AblationRow]
    per_seed: list[dict] = field(default_factory=list)

    def tsv(self) -> str:
        lines = ["\t".join(ABLATION_COLUMNS)]
        for r in self.rows:
            vals = [r.variant, f"{r.iou_mean:.4f}", f"{r.iou_std:.4f}", _fmt(r.delta), _fmt(r.delta_prev), _fmt(r.answer_acc), str(r.n_models)]
            lines.append("\t".join(vals))
        return "\n".join(lines) + "\n"

    def text(self) -> str:
        out = [f"{'Variant':<30} {'IoU (%)':>16} {'Δ (%)':>8}"]
        for r in self.rows:
            iou_s = f"{r.iou_mean:.2f} ± {r.iou_std:.2f}"
            d = "--" if r.delta_prev is None else f"{r.delta_prev:+.2f}"
            out.append(f"{r.variant:<30} {iou_s:>16} {d:>8}")
        return "\n".join(out) + "\n"


def _fmt(x) -> str:
    return "--" if x is None else f"{x:.4f}"


def parse_ablation_tsv(text: str) -> list[dict]:
    lines = text.strip().splitlines()
    header = lines[0].split("\t")
    if tuple(header) != ABLATION_COLUMNS:
        raise ValueError(f"unexpected ablation header {header}")
    rows = []
    for line in lines[1:]:
        vals = dict(zip(header, line.split("\t")))
        for k in ABLATION_COLUMNS[1:]:
            vals[k] = None if vals[k] == "--" else float(vals[k])
        rows.append(vals)
    return rows


def ablation_table(baseline_reports, davi_reports, ensemble_report) -> AblationResult:
    def stats(reps):
        xs = np.array([r.mean_iou for r in reps])
        return float(xs.mean()), float(xs.std())

    b_mean, b_std = stats(baseline_reports)
    d_mean, d_std = stats(davi_reports)
    d_acc = float(np.mean([r.answer_accuracy for r in davi_reports]))
    e = ensemble_report.mean_iou
    rows = [
        AblationRow(VARIANTS[0], b_mean, b_std, None, None, None, len(baseline_reports)),
        AblationRow(VARIANTS[1], d_mean, d_std, d_mean - b_mean, d_mean - b_mean, d_acc, len(davi_reports)),
        AblationRow(VARIANTS[2], e, 0.0, e - b_mean, e - d_mean, ensemble_report.answer_accuracy, len(davi_reports)),
    ]
    return AblationResult(rows)


def _train_job(job):
    from .train import train

    kind, seed, config, tcfg, train_samples, test_samples, dtype = job
    T.set_default_dtype(dtype)
    res = train(kind, train_samples, config, replace(tcfg, seed=seed))
    report = evaluate([res.checkpoint], test_samples)
    return kind, seed, res.checkpoint, report, res.log


def run_ablation(
    train_samples: list[Sample],
    test_samples: list[Sample],
    seeds,
    config: ModelConfig,
    tcfg,
    lambdas=(1.0,),
    workers: int | None = None,
    out_dir=None,
) -> AblationResult:
    """Train baseline and dual model per seed under one budget; add the seed ensemble.

    Seed ``i`` trains the dual model with ``lambdas[i % len(lambdas)]``; the
    baseline always uses ``tcfg.mask_loss_weight``.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("run_ablation needs at least 3 seeds")
    if workers is None:
        workers = int(os.environ.get("DAVI_THREADS", "1") or 1)
    dtype = T.get_default_dtype()
    jobs = []
    for i, s in enumerate(seeds):
        jobs.append(("baseline", s, config, tcfg, train_samples, test_samples, dtype))
        dav = replace(tcfg, mask_loss_weight=lambdas[i % len(lambdas)])
        jobs.append(("davi", s, config, dav, train_samples, test_samples, dtype))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]

    base = [r for r in results if r[0] == "baseline"]
    dav = [r for r in results if r[0] == "davi"]
    ens = evaluate([r[2] for r in dav], test_samples, names=[f"davi-seed{r[1]}" for r in dav])
    result = ablation_table([r[3] for r in base], [r[3] for r in dav], ens)
    result.per_seed = [
        {"kind": k, "seed": s, "iou": rep.mean_iou, "answer_acc": rep.answer_accuracy}
        for k, s, _, rep, _ in results
    ]
    if out_dir is not None:
        from . import checkpoint as ckpt_io

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, s, ck, rep, logrec in results:
            ckpt_io.save(ck, out / f"{k}_seed{s}.ckpt")
            with open(out / f"{k}_seed{s}_metrics.jsonl", "w", encoding="utf-8") as fh:
                fh.writelines(json.dumps(r) + "\n" for r in logrec)
        (out / "ablation.tsv").write_text(result.tsv(), encoding="utf-8")
        (out / "ablation.txt").write_text(result.text(), encoding="utf-8")
        with open(out / "ablation_runs.jsonl", "w", encoding="utf-8") as fh:
            fh.writelines(json.dumps(r) + "\n" for r in result.per_seed)
    return result


