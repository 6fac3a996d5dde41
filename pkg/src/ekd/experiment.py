"""Orchestration: staged distillation plans, baselines, and reports.

A plan names a student configuration and an ordered list of stages, each
pointing at a frozen teacher checkpoint.  Running a plan carries the
student's parameters from one stage into the next, so a two-stage chain
really is one model that first learns from the junior teacher and then
from the senior one.  Baselines reuse the same machinery: a single-teacher
run is literally a one-stage plan, and the teacher-assistant variant
trains the intermediate model first, then distills the student from it.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .decoding import beam_search_batch
from .errors import ConfigError, ContractError, HierarchyError
from .metrics import bleu, flops_estimate, gap_report
from .model import ModelConfig, TransformerModel, build, count_params
from .optim import AdamHyper, AdamState
from .text import BpeTable, Vocabulary, decode, encode, read_corpus
from .trainer import StageConfig, StageData, train_stage, write_metrics

log = logging.getLogger("ekd")

__all__ = [
    "MODES",
    "StageSpec",
    "DistillPlan",
    "RunPaths",
    "StageReport",
    "ExperimentReport",
    "KnowledgeComparison",
    "LoadedData",
    "load_data",
    "delta_learn",
    "validate_hierarchy",
    "run_plan",
    "run_baseline",
    "compare_knowledge",
    "write_report",
    "parse_report",
    "test_bleu_of",
]

MODES = ("ekd", "single_teacher", "takd", "scratch")

REPORT_FORMAT = "ekd-report-v1"

# Capacity ratios between adjacent chain members outside this band get a
# warning: the gap is probably too small to matter or too large to bridge.
RATIO_BAND = (2.0, 3.0)


@dataclass
class StageSpec:
    epochs: int
    teacher_checkpoint: str | None = None
    mix_weight: float = 0.5
    formulation: str = "convex"
    seed: int = 1


@dataclass
class DistillPlan:
    mode: str
    student: ModelConfig
    stages: list[StageSpec]
    label_smoothing: float = 0.1
    dropout: float | None = None
    max_tokens: int = 4096
    max_decode_len: int = 64
    beam_size: int = 5
    length_penalty: float = 1.0
    carry_optimizer: bool = False
    hyper: AdamHyper = field(default_factory=AdamHyper)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown plan mode {self.mode!r}; expected one of {MODES}")
        if not self.stages:
            raise ConfigError("a plan needs at least one stage")
        with_teacher = [s.teacher_checkpoint is not None for s in self.stages]
        if self.mode == "scratch":
            if len(self.stages) != 1 or with_teacher[0]:
                raise ConfigError("scratch mode takes exactly one teacherless stage")
        elif self.mode == "single_teacher":
            if len(self.stages) != 1 or not with_teacher[0]:
                raise ConfigError("single_teacher mode takes exactly one stage with a teacher")
        elif self.mode == "ekd":
            if not all(with_teacher):
                raise ConfigError("every ekd stage needs a teacher checkpoint")
        elif self.mode == "takd":
            raise ConfigError("takd runs through run_baseline('takd', ...), not run_plan")
        for s in self.stages:
            if s.epochs < 0:
                raise ConfigError(f"stage epochs must be non-negative, got {s.epochs}")
            if s.formulation not in ("convex", "additive"):
                raise ConfigError(f"unknown formulation {s.formulation!r}")
            if not 0.0 <= s.mix_weight <= 1.0:
                raise ConfigError(f"mix_weight must lie in [0, 1], got {s.mix_weight}")


@dataclass
class RunPaths:
    data_dir: Path
    out_dir: Path

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        self.out_dir = Path(self.out_dir)


@dataclass
class StageReport:
    label: str
    seed: int
    epochs: int
    steps: int
    train_tokens: int
    student_params: int
    teacher_params: int | None
    test_bleu: float
    teacher_test_bleu: float | None
    gap_abs: float | None
    gap_pct: float | None
    valid_bleu_best: float | None
    train_flops: float


@dataclass
class ExperimentReport:
    vocab_hash: str
    test_hash: str
    student_params: int
    stages: list[StageReport]
    final_test_bleu: float
    total_train_flops: float


# ---------------------------------------------------------------------------
# Hierarchy diagnostics
# ---------------------------------------------------------------------------

def delta_learn(n_big: int, n_small: int) -> float:
    """Learnability proxy for a capacity hop: the small/big parameter ratio.

    The relative gap is ``r = (n_big - n_small) / n_big``; the proxy is the
    decreasing function ``1 - r``.  Values near 1 mean an easy hop, values
    near 0 a hard one.  Diagnostic only; nothing branches on it.
    """
    if n_small <= 0 or n_big < n_small:
        raise ContractError(
            f"delta_learn needs n_big >= n_small > 0, got {n_big}, {n_small}"
        )
    return n_small / n_big


def validate_hierarchy(
    student_config: ModelConfig,
    teacher_configs: Sequence[ModelConfig],
) -> list[str]:
    """Check that teachers strictly ascend in capacity above the student.

    Raises HierarchyError on any violation.  Returns advisory strings for
    adjacent capacity ratios outside the recommended band; callers log
    them but proceed.
    """
    if not teacher_configs:
        raise ContractError("validate_hierarchy needs at least one teacher")
    counts = [count_params(student_config)] + [count_params(c) for c in teacher_configs]
    names = ["student"] + [f"teacher{i + 1}" for i in range(len(teacher_configs))]
    for a, b in zip(range(len(counts) - 1), range(1, len(counts))):
        if counts[b] <= counts[a]:
            raise HierarchyError(
                f"{names[b]} ({counts[b]} params) must exceed {names[a]} "
                f"({counts[a]} params); the chain must strictly ascend"
            )
    warnings = []
    lo, hi = RATIO_BAND
    for a in range(len(counts) - 1):
        ratio = counts[a + 1] / counts[a]
        if not lo <= ratio <= hi:
            warnings.append(
                f"capacity ratio {ratio:.2f} between {names[a]} and {names[a + 1]} "
                f"is outside [{lo:g}, {hi:g}]; learnability proxy "
                f"{delta_learn(counts[a + 1], counts[a]):.3f}"
            )
    return warnings


# ---------------------------------------------------------------------------
# Data loading
# ---------------------------------------------------------------------------

@dataclass
class LoadedData:
    bpe: BpeTable
    vocab: Vocabulary
    vocab_hash: str
    train: list[tuple[np.ndarray, np.ndarray]]
    valid: list[tuple[np.ndarray, np.ndarray]]
    test: list[tuple[np.ndarray, np.ndarray]]
    test_refs: list[str]
    test_hash: str


def load_data(data_dir: str | Path) -> LoadedData:
    """Read the make-data layout: three corpus splits, BPE table, vocabulary."""
    data_dir = Path(data_dir)
    for stem in ("bpe.txt", "vocab.txt"):
        if not (data_dir / stem).exists():
            raise ConfigError(f"data directory {data_dir} is missing {stem}")
    bpe = BpeTable.load(data_dir / "bpe.txt")
    vocab = Vocabulary.load(data_dir / "vocab.txt")

    def enc_split(name: str):
        pairs = read_corpus(data_dir / name)
        return [(encode(s, bpe, vocab), encode(t, bpe, vocab)) for s, t in pairs], pairs

    train, _ = enc_split("train")
    valid, _ = enc_split("valid")
    test, test_pairs = enc_split("test")
    test_refs = [decode(t, vocab) for _, t in test]
    digest = hashlib.sha256()
    for s, t in test_pairs:
        digest.update(s.encode("utf-8") + b"\x00" + t.encode("utf-8") + b"\n")
    return LoadedData(
        bpe=bpe,
        vocab=vocab,
        vocab_hash=vocab.content_hash(),
        train=train,
        valid=valid,
        test=test,
        test_refs=test_refs,
        test_hash=digest.hexdigest(),
    )


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

_TEST_BLEU_CACHE: dict[tuple, float] = {}


def test_bleu_of(
    model: TransformerModel,
    data: LoadedData,
    beam_size: int = 5,
    length_penalty: float = 1.0,
    max_decode_len: int = 64,
) -> float:
    """Beam-decoded corpus BLEU on the test split.

    Results are memoized on (parameter bytes, test set, decode options):
    teachers are evaluated inside every student run, and their scores are
    pure functions of these inputs.
    """
    key = (
        hashlib.sha256(model.param_bytes()).hexdigest(),
        data.test_hash,
        beam_size,
        length_penalty,
        max_decode_len,
    )
    hit = _TEST_BLEU_CACHE.get(key)
    if hit is not None:
        return hit
    model.eval()
    hyps = beam_search_batch(
        model,
        [src for src, _ in data.test],
        beam_size=beam_size,
        max_len=max_decode_len,
        length_penalty=length_penalty,
    )
    score = bleu([decode(h.tokens, data.vocab) for h in hyps], data.test_refs)
    _TEST_BLEU_CACHE[key] = score
    return score


def _load_teacher(path: str | Path, data: LoadedData) -> TransformerModel:
    teacher, _ = load_checkpoint(path)
    if teacher.vocab_hash is not None and teacher.vocab_hash != data.vocab_hash:
        raise ConfigError(
            f"teacher checkpoint {path} was trained against vocabulary "
            f"{teacher.vocab_hash[:12]}, but the data directory has {data.vocab_hash[:12]}"
        )
    if teacher.config.vocab_size != len(data.vocab):
        raise ConfigError(
            f"teacher checkpoint {path} has vocab size {teacher.config.vocab_size}, "
            f"data has {len(data.vocab)}"
        )
    return teacher.eval()


# ---------------------------------------------------------------------------
# Plan execution
# ---------------------------------------------------------------------------

def run_plan(plan: DistillPlan, paths: RunPaths) -> ExperimentReport:
    """Execute every stage of a plan and write checkpoints, metrics, report."""
    plan.validate()
    data = load_data(paths.data_dir)
    student_config = plan.student
    if student_config.vocab_size != len(data.vocab):
        raise ConfigError(
            f"student config vocab size {student_config.vocab_size} does not match "
            f"data vocabulary {len(data.vocab)}"
        )

    teachers: list[TransformerModel | None] = []
    for spec in plan.stages:
        teachers.append(
            _load_teacher(spec.teacher_checkpoint, data)
            if spec.teacher_checkpoint is not None
            else None
        )
    teacher_configs = [t.config for t in teachers if t is not None]
    if plan.mode in ("ekd", "single_teacher") and teacher_configs:
        for w in validate_hierarchy(student_config, teacher_configs):
            log.warning("%s", w)

    paths.out_dir.mkdir(parents=True, exist_ok=True)
    student = build(student_config, seed=plan.stages[0].seed)
    student.vocab_hash = data.vocab_hash

    stage_data = StageData(train=data.train, valid=data.valid, vocab=data.vocab)
    stage_reports: list[StageReport] = []
    state: AdamState | None = None
    total_flops = 0.0

    for k, (spec, teacher) in enumerate(zip(plan.stages, teachers), start=1):
        label = f"stage{k}"
        cfg = StageConfig(
            epochs=spec.epochs,
            seed=spec.seed,
            stage_label=label,
            mix_weight=spec.mix_weight,
            formulation=spec.formulation,
            label_smoothing=plan.label_smoothing,
            dropout=plan.dropout,
            max_tokens=plan.max_tokens,
            max_decode_len=plan.max_decode_len,
            hyper=plan.hyper,
        )
        if not plan.carry_optimizer:
            state = None
        log.info(
            "%s: %d epochs, teacher=%s, mix=%.2f (%s)",
            label,
            spec.epochs,
            spec.teacher_checkpoint or "none",
            spec.mix_weight,
            spec.formulation,
        )
        result = train_stage(student, teacher, stage_data, cfg, state=state)
        state = result.state
        student = result.model

        train_tokens = sum(len(t) for _, t in data.train) * spec.epochs
        stage_flops = flops_estimate(student_config, train_tokens, "train")
        if teacher is not None:
            stage_flops += flops_estimate(teacher.config, train_tokens, "forward")
        total_flops += stage_flops

        s_bleu = test_bleu_of(
            student, data, plan.beam_size, plan.length_penalty, plan.max_decode_len
        )
        t_bleu = gap_abs = gap_pct = None
        if teacher is not None:
            t_bleu = test_bleu_of(
                teacher, data, plan.beam_size, plan.length_penalty, plan.max_decode_len
            )
            gap = gap_report(s_bleu, t_bleu)
            gap_abs, gap_pct = gap.absolute, gap.percent
        stage_reports.append(
            StageReport(
                label=label,
                seed=spec.seed,
                epochs=spec.epochs,
                steps=state.step,
                train_tokens=train_tokens,
                student_params=count_params(student_config),
                teacher_params=count_params(teacher.config) if teacher else None,
                test_bleu=s_bleu,
                teacher_test_bleu=t_bleu,
                gap_abs=gap_abs,
                gap_pct=gap_pct,
                valid_bleu_best=result.best_bleu,
                train_flops=stage_flops,
            )
        )
        save_checkpoint(student, state, paths.out_dir / f"{label}.ekd", stage=label, seed=spec.seed)
        write_metrics(result.log, paths.out_dir / f"{label}.metrics.csv")

    report = ExperimentReport(
        vocab_hash=data.vocab_hash,
        test_hash=data.test_hash,
        student_params=count_params(student_config),
        stages=stage_reports,
        final_test_bleu=stage_reports[-1].test_bleu,
        total_train_flops=total_flops,
    )
    write_report(report, paths.out_dir / "report.txt")
    return report


def run_baseline(
    kind: str,
    plan: DistillPlan,
    paths: RunPaths,
    ta_config: ModelConfig | None = None,
    ta_epochs: int | None = None,
) -> ExperimentReport:
    """Run a comparison pipeline.

    ``single_teacher`` executes the plan's single stage as-is.  ``takd``
    first distills a teacher assistant (``ta_config``) from the plan's
    teacher, then distills the student from that assistant; both reports
    are merged so the assistant's cost shows up in the totals.
    """
    if kind == "single_teacher":
        if plan.mode != "single_teacher":
            raise ConfigError(f"plan mode {plan.mode!r} does not match baseline kind")
        return run_plan(plan, paths)
    if kind != "takd":
        raise ConfigError(f"unknown baseline kind {kind!r}")
    if plan.mode != "takd":
        raise ConfigError(f"plan mode {plan.mode!r} does not match baseline kind")
    if ta_config is None:
        raise ConfigError("takd needs a teacher-assistant configuration")
    if len(plan.stages) != 1 or plan.stages[0].teacher_checkpoint is None:
        raise ConfigError("takd takes exactly one stage naming the senior teacher")

    spec = plan.stages[0]
    n_student = count_params(plan.student)
    n_ta = count_params(ta_config)
    data_probe = load_data(paths.data_dir)
    senior = _load_teacher(spec.teacher_checkpoint, data_probe)
    n_senior = count_params(senior.config)
    if not n_student < n_ta < n_senior:
        raise HierarchyError(
            f"teacher assistant must sit strictly between student ({n_student}) "
            f"and teacher ({n_senior}), got {n_ta}"
        )

    ta_paths = RunPaths(paths.data_dir, Path(paths.out_dir) / "ta")
    ta_plan = DistillPlan(
        mode="single_teacher",
        student=ta_config,
        stages=[
            StageSpec(
                epochs=ta_epochs if ta_epochs is not None else spec.epochs,
                teacher_checkpoint=spec.teacher_checkpoint,
                mix_weight=spec.mix_weight,
                formulation=spec.formulation,
                seed=spec.seed,
            )
        ],
        label_smoothing=plan.label_smoothing,
        dropout=plan.dropout,
        max_tokens=plan.max_tokens,
        max_decode_len=plan.max_decode_len,
        beam_size=plan.beam_size,
        length_penalty=plan.length_penalty,
        hyper=plan.hyper,
    )
    ta_report = run_plan(ta_plan, ta_paths)

    student_paths = RunPaths(paths.data_dir, Path(paths.out_dir) / "student")
    student_plan = DistillPlan(
        mode="single_teacher",
        student=plan.student,
        stages=[
            StageSpec(
                epochs=spec.epochs,
                teacher_checkpoint=str(ta_paths.out_dir / "stage1.ekd"),
                mix_weight=spec.mix_weight,
                formulation=spec.formulation,
                seed=spec.seed,
            )
        ],
        label_smoothing=plan.label_smoothing,
        dropout=plan.dropout,
        max_tokens=plan.max_tokens,
        max_decode_len=plan.max_decode_len,
        beam_size=plan.beam_size,
        length_penalty=plan.length_penalty,
        hyper=plan.hyper,
    )
    student_report = run_plan(student_plan, student_paths)

    ta_stage = ta_report.stages[0]
    ta_stage.label = "ta"
    merged = ExperimentReport(
        vocab_hash=student_report.vocab_hash,
        test_hash=student_report.test_hash,
        student_params=student_report.student_params,
        stages=[ta_stage] + student_report.stages,
        final_test_bleu=student_report.final_test_bleu,
        total_train_flops=ta_report.total_train_flops + student_report.total_train_flops,
    )
    write_report(merged, Path(paths.out_dir) / "report.txt")
    return merged


# ---------------------------------------------------------------------------
# Knowledge comparison
# ---------------------------------------------------------------------------

@dataclass
class KnowledgeComparison:
    proxy: str
    values: dict[str, list[float]]
    means: dict[str, float]
    left: str
    right: str
    margin: float
    verdict: str  # "greater", "tie", or "less"

    def formatted(self) -> str:
        lines = [f"knowledge proxy: {self.proxy}"]
        for label in self.values:
            per_seed = ", ".join(f"{v:.4f}" for v in self.values[label])
            lines.append(f"{label}: mean {self.means[label]:.4f} [{per_seed}]")
        lines.append(
            f"verdict: {self.left} {'>' if self.verdict == 'greater' else '=' if self.verdict == 'tie' else '<'} "
            f"{self.right} (margin {self.margin:+.4f})"
        )
        return "\n".join(lines)


def compare_knowledge(
    groups: Mapping[str, Sequence[ExperimentReport]],
    left: str,
    right: str,
) -> KnowledgeComparison:
    """Compare transferred knowledge between run groups via final test BLEU.

    Every report must come from the same test split and vocabulary;
    otherwise the comparison is meaningless and a contract error is
    raised.  The verdict says whether the ``left`` group's mean exceeds
    the ``right`` group's.
    """
    if left not in groups or right not in groups:
        raise ContractError(f"groups must contain {left!r} and {right!r}")
    ref = None
    for label, reports in groups.items():
        if not reports:
            raise ContractError(f"group {label!r} has no reports")
        for r in reports:
            if ref is None:
                ref = (r.vocab_hash, r.test_hash)
            elif (r.vocab_hash, r.test_hash) != ref:
                raise ContractError(
                    "reports mix different vocabularies or test splits; "
                    f"group {label!r} disagrees with the first report"
                )
    values = {label: [r.final_test_bleu for r in reports] for label, reports in groups.items()}
    means = {label: float(np.mean(v)) for label, v in values.items()}
    margin = means[left] - means[right]
    verdict = "greater" if margin > 0 else ("less" if margin < 0 else "tie")
    return KnowledgeComparison(
        proxy="test_bleu",
        values=values,
        means=means,
        left=left,
        right=right,
        margin=margin,
        verdict=verdict,
    )


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def _fmt_opt(value: float | int | None, spec: str = ".4f") -> str:
    return "-" if value is None else format(value, spec)


def write_report(report: ExperimentReport, path: str | Path) -> Path:
    lines = [
        f"format = {REPORT_FORMAT}",
        f"vocab_hash = {report.vocab_hash}",
        f"test_hash = {report.test_hash}",
        f"student_params = {report.student_params}",
        f"stages = {len(report.stages)}",
    ]
    for i, s in enumerate(report.stages, start=1):
        p = f"stage.{i}"
        lines += [
            f"{p}.label = {s.label}",
            f"{p}.seed = {s.seed}",
            f"{p}.epochs = {s.epochs}",
            f"{p}.steps = {s.steps}",
            f"{p}.train_tokens = {s.train_tokens}",
            f"{p}.student_params = {s.student_params}",
            f"{p}.teacher_params = {_fmt_opt(s.teacher_params, 'd')}",
            f"{p}.test_bleu = {s.test_bleu:.4f}",
            f"{p}.teacher_test_bleu = {_fmt_opt(s.teacher_test_bleu)}",
            f"{p}.gap_abs = {_fmt_opt(s.gap_abs)}",
            f"{p}.gap_pct = {_fmt_opt(s.gap_pct)}",
            f"{p}.valid_bleu_best = {_fmt_opt(s.valid_bleu_best)}",
            f"{p}.train_flops = {s.train_flops:.6e}",
        ]
    lines += [
        f"final_test_bleu = {report.final_test_bleu:.4f}",
        f"total_train_flops = {report.total_train_flops:.6e}",
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse_opt(raw: str, cast):
    return None if raw == "-" else cast(raw)


def parse_report(path: str | Path) -> ExperimentReport:
    """Inverse of write_report; unknown or missing keys fail loudly."""
    kv: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        if not _:
            raise ConfigError(f"report line is not 'key = value': {line!r}")
        kv[key] = value
    if kv.get("format") != REPORT_FORMAT:
        raise ConfigError(f"{path} is not a {REPORT_FORMAT} file")
    n = int(kv["stages"])
    stages = []
    for i in range(1, n + 1):
        p = f"stage.{i}"
        stages.append(
            StageReport(
                label=kv[f"{p}.label"],
                seed=int(kv[f"{p}.seed"]),
                epochs=int(kv[f"{p}.epochs"]),
                steps=int(kv[f"{p}.steps"]),
                train_tokens=int(kv[f"{p}.train_tokens"]),
                student_params=int(kv[f"{p}.student_params"]),
                teacher_params=_parse_opt(kv[f"{p}.teacher_params"], int),
                test_bleu=float(kv[f"{p}.test_bleu"]),
                teacher_test_bleu=_parse_opt(kv[f"{p}.teacher_test_bleu"], float),
                gap_abs=_parse_opt(kv[f"{p}.gap_abs"], float),
                gap_pct=_parse_opt(kv[f"{p}.gap_pct"], float),
                valid_bleu_best=_parse_opt(kv[f"{p}.valid_bleu_best"], float),
                train_flops=float(kv[f"{p}.train_flops"]),
            )
        )
    return ExperimentReport(
        vocab_hash=kv["vocab_hash"],
        test_hash=kv["test_hash"],
        student_params=int(kv["student_params"]),
        stages=stages,
        final_test_bleu=float(kv["final_test_bleu"]),
        total_train_flops=float(kv["total_train_flops"]),
    )
