"""Reproducible experiment recipes over the four-stage pipeline.

A `Workbench` owns one seeded run: the oracle corpus, the stage plans, and a
cache of stage checkpoints so paired recipe arms share everything upstream of
the step where they differ (the no-alignment arm reuses the main source
checkpoint, the decoder-finetune arm reuses source and aligning, and so on).
`run_experiment` drives a named recipe and writes checkpoints, per-utterance
reports, and summaries into an output directory; identical (config, recipe,
seed) triples produce byte-identical files.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

from . import pipeline as pl
from . import synthdata as sd
from .checkpoint import save_checkpoint
from .errors import ConfigError
from .evalmetrics import mel_distance, paired_report, speaker_proximity, write_report_csv

RECIPES = ("main", "joint", "no-l2", "finetune-all", "data-sweep")
SWEEP_SIZES = (1, 2, 5, 10, 20, 50, 100)

ADAPT_POOL = 100       # mel-only records generated per adaptation speaker
EVAL_COUNT = 16        # held-out transcripted utterances per adaptation speaker
DEFAULT_ADAPT_N = 50

EVAL_METRICS = ("mel_mae", "proximity")


def _utt_uid(speaker_id, utterance_id):
    return speaker_id * 1000 + utterance_id


@dataclass
class Workbench:
    cfg: object
    seed: int
    spec: object = None
    source_corpus: object = None
    adapt_corpora: dict = field(default_factory=dict)
    _ckpts: dict = field(default_factory=dict)
    _metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.spec is None:
            self.spec = replace(self.cfg.oracle,
                                seed=self.cfg.oracle.seed + 1009 * self.seed)
        if self.source_corpus is None:
            self.source_corpus = sd.gen_corpus(
                self.spec, self.cfg.corpus.n_speakers,
                self.cfg.corpus.utts_per_speaker)
        if not self.adapt_corpora:
            for spk in self.cfg.adapt_speaker_ids():
                self.adapt_corpora[spk] = sd.gen_corpus(
                    self.spec, 1, ADAPT_POOL + EVAL_COUNT, first_speaker=spk)

    def all_speaker_ids(self):
        return sorted(set(self.source_corpus.speakers())
                      | set(self.adapt_corpora))

    # -- stage checkpoints, cached by content-determining key ---------------

    def source(self, variant="main"):
        key = ("source", variant)
        if key not in self._ckpts:
            plan = self.cfg.source_plan(variant)
            plan = replace(plan, seed=plan.seed + self.seed)
            ckpt, metrics = pl.train_source(self.source_corpus,
                                            self.cfg.model, plan)
            self._ckpts[key] = ckpt
            self._metrics[key] = metrics
        return self._ckpts[key]

    def aligned(self, variant="main"):
        key = ("aligned", variant)
        if key not in self._ckpts:
            plan = self.cfg.align_plan(variant)
            plan = replace(plan, seed=plan.seed + self.seed)
            ckpt, metrics = pl.align_mel_encoder(self.source("main"),
                                                 self.source_corpus, plan)
            self._ckpts[key] = ckpt
            self._metrics[key] = metrics
        return self._ckpts[key]

    def adapt_records(self, speaker, n):
        pool = sd.strip_transcripts(self.adapt_corpora[speaker], speaker)
        if n > ADAPT_POOL:
            raise ConfigError(f"adaptation pool holds {ADAPT_POOL} records, "
                              f"asked for {n}")
        return pool[:n]

    def eval_utterances(self, speaker):
        utts = self.adapt_corpora[speaker].of_speaker(speaker)
        return utts[ADAPT_POOL:ADAPT_POOL + EVAL_COUNT]

    def adapted(self, speaker, n=DEFAULT_ADAPT_N, variant="main", base="main"):
        """base picks the upstream path: 'main' (source+align), 'joint'
        (jointly trained source, no aligning stage), 'no_l2' (align without
        the latent constraint)."""
        key = ("adapted", base, variant, speaker, n)
        if key not in self._ckpts:
            if base == "main":
                upstream = self.aligned("main")
            elif base == "joint":
                upstream = self.source("joint_training")
            elif base == "no_l2":
                upstream = self.aligned("no_l2")
            else:
                raise ConfigError(f"unknown adaptation base '{base}'")
            plan = self.cfg.adapt_plan(
                variant, seed=self.cfg.adapt.seed + self.seed + 31 * speaker + n)
            ckpt, metrics = pl.adapt_untranscribed(
                upstream, self.adapt_records(speaker, n), plan)
            self._ckpts[key] = ckpt
            self._metrics[key] = metrics
        return self._ckpts[key]

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, ckpt, speaker) -> dict:
        """Metric values for each held-out utterance of `speaker`,
        keyed {metric: {uid: value}}."""
        out = {m: {} for m in EVAL_METRICS}
        for utt in self.eval_utterances(speaker):
            mel = pl.synthesize(ckpt, utt.phonemes, speaker)
            uid = _utt_uid(speaker, utt.utterance_id)
            out["mel_mae"][uid] = mel_distance(mel, utt.mel).value
            out["proximity"][uid] = speaker_proximity(
                mel, speaker, self.spec, self.all_speaker_ids())
        return out

    def evaluate_arm(self, ckpt_for_speaker) -> dict:
        """Pool per-speaker evaluations; `ckpt_for_speaker` maps speaker ->
        checkpoint to synthesize with."""
        pooled = {m: {} for m in EVAL_METRICS}
        for speaker in sorted(ckpt_for_speaker):
            got = self.evaluate(ckpt_for_speaker[speaker], speaker)
            for m in EVAL_METRICS:
                pooled[m].update(got[m])
        return pooled


def _arm_checkpoints(bench, recipe, n=DEFAULT_ADAPT_N):
    """(arm_a_name, ckpts_by_speaker, arm_b_name, ckpts_by_speaker)."""
    speakers = bench.cfg.adapt_speaker_ids()
    main_arm = {s: bench.adapted(s, n) for s in speakers}
    if recipe == "main":
        return "adapted", main_arm, "unadapted", {s: bench.aligned() for s in speakers}
    if recipe == "joint":
        return "main", main_arm, "joint", {
            s: bench.adapted(s, n, base="joint") for s in speakers}
    if recipe == "no-l2":
        return "main", main_arm, "no_l2", {
            s: bench.adapted(s, n, base="no_l2") for s in speakers}
    if recipe == "finetune-all":
        return "main", main_arm, "finetune", {
            s: bench.adapted(s, n, variant="finetune_mel_encoder_and_decoder")
            for s in speakers}
    raise ConfigError(f"unknown recipe '{recipe}' (choose from {RECIPES})")


@dataclass
class ExperimentResult:
    recipe: str
    report_rows: list        # (utterance_id, arm, metric, value)
    summaries: list
    sweep_means: dict = None  # data-sweep only: {metric: {n: mean}}

    def summary_text(self):
        return "\n".join(self.summaries) + "\n"


def run_experiment(recipe, cfg, seed=0, out_dir=None) -> ExperimentResult:
    if recipe not in RECIPES:
        raise ConfigError(f"unknown recipe '{recipe}' (choose from {RECIPES})")
    bench = Workbench(cfg, seed)
    if recipe == "data-sweep":
        result = _run_sweep(bench)
    else:
        result = _run_paired(bench, recipe)
    if out_dir is not None:
        _write_outputs(bench, result, Path(out_dir))
    return result


def _run_paired(bench, recipe) -> ExperimentResult:
    name_a, arm_a, name_b, arm_b = _arm_checkpoints(bench, recipe)
    vals_a = bench.evaluate_arm(arm_a)
    vals_b = bench.evaluate_arm(arm_b)
    rows, summaries = [], []
    for metric in EVAL_METRICS:
        rep = paired_report(name_a, vals_a[metric], name_b, vals_b[metric],
                            metric=metric)
        rows.extend(rep.rows())
        summaries.append(rep.summary())
    return ExperimentResult(recipe=recipe, report_rows=rows, summaries=summaries)


def _run_sweep(bench) -> ExperimentResult:
    speakers = bench.cfg.adapt_speaker_ids()
    rows, summaries = [], []
    means = {m: {} for m in EVAL_METRICS}
    for n in SWEEP_SIZES:
        arm = f"n={n}"
        vals = bench.evaluate_arm({s: bench.adapted(s, n) for s in speakers})
        for metric in EVAL_METRICS:
            per_utt = vals[metric]
            for uid in sorted(per_utt):
                rows.append((uid, arm, metric, per_utt[uid]))
            mean = sum(per_utt[u] for u in sorted(per_utt)) / len(per_utt)
            means[metric][n] = mean
        summaries.append(
            f"n={n}: " + ", ".join(
                f"mean {m} {means[m][n]:.6f}" for m in EVAL_METRICS))
    return ExperimentResult(recipe="data-sweep", report_rows=rows,
                            summaries=summaries, sweep_means=means)


def _write_outputs(bench, result, out_dir):
    from .config import write_effective_config

    out_dir.mkdir(parents=True, exist_ok=True)
    write_effective_config(bench.cfg, out_dir)
    for key, ckpt in sorted(bench._ckpts.items(), key=repr):
        stem = "_".join(str(p) for p in key)
        save_checkpoint(ckpt, out_dir / f"{stem}.ckpt")
        metrics = bench._metrics.get(key)
        if metrics:
            pl.write_metrics(metrics, out_dir / f"{stem}_metrics.csv")
    write_report_csv(result.report_rows, out_dir / "report.csv")
    (out_dir / "summary.txt").write_text(result.summary_text())
    if result.sweep_means is not None:
        lines = ["n," + ",".join(f"mean_{m}" for m in EVAL_METRICS)]
        for n in SWEEP_SIZES:
            vals = ",".join(repr(result.sweep_means[m][n]) for m in EVAL_METRICS)
            lines.append(f"{n},{vals}")
        (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
