"""Command-line entry point.

Subcommands cover corpus generation, the three training stages, inference,
objective evaluation, and the paired experiment recipes. Every run is fully
determined by its config file, flags, and seed; the effective configuration is
echoed next to each output so results are self-describing.

Exit codes: 0 success, 2 configuration error, 3 parameter-freeze violation,
4 numeric failure, 5 file-format error. Set MELADAPT_VERBOSE=1 for per-stage
loss chatter.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import binio
from . import experiments as ex
from . import pipeline as pl
from . import synthdata as sd
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_text, desk_config, load_config, write_effective_config
from .errors import ConfigError, MelAdaptError
from .evalmetrics import mel_distance, paired_report, speaker_proximity, write_report_csv

MEL_MAGIC = b"MAMEL\x00\x00\x01"
MEL_VERSION = 1


def _verbose() -> bool:
    return os.environ.get("MELADAPT_VERBOSE", "") not in ("", "0")


def _say(msg):
    print(msg)


def _chat(msg):
    if _verbose():
        print(msg)


def _load_cfg(args):
    if getattr(args, "config", None):
        return load_config(args.config)
    return desk_config()


def _resolve_corpus(path, default_name="source.corpus"):
    p = Path(path)
    if p.is_dir():
        p = p / default_name
    return p


def _echo_config(cfg, out_path):
    """Write the effective config next to an output file or into a directory."""
    out_path = Path(out_path)
    if out_path.is_dir():
        return write_effective_config(cfg, out_path)
    target = out_path.with_name(out_path.name + ".cfg")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(config_text(cfg))
    return target


def save_mel(mel, path, speaker_id):
    mel = np.asarray(mel, dtype=np.float64)
    meta = {"speaker_id": int(speaker_id), "n_frames": int(mel.shape[0]),
            "mel_dim": int(mel.shape[1])}
    binio.write_container(path, MEL_MAGIC, MEL_VERSION, meta, {"mel": mel})


def load_mel(path):
    meta, arrays = binio.read_container(path, MEL_MAGIC, MEL_VERSION)
    return arrays["mel"], meta


def _tail_losses(metrics, stage):
    last = {}
    for step, st, name, value in metrics:
        if st == stage:
            last[name] = value
    return ", ".join(f"{k} {v:.5f}" for k, v in sorted(last.items()))


# -- subcommands ------------------------------------------------------------

def cmd_gen_corpus(args):
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.oracle
    source = sd.gen_corpus(spec, cfg.corpus.n_speakers, cfg.corpus.utts_per_speaker)
    sd.save_corpus(source, out / "source.corpus")
    manifest = {
        "spec": {"seed": spec.seed, "phoneme_vocab_size": spec.phoneme_vocab_size,
                 "mel_dim": spec.mel_dim, "noise_sigma": spec.noise_sigma},
        "source": {"file": "source.corpus", "hash": sd.corpus_hash(source),
                   "speakers": source.speakers()},
        "adaptation": {},
    }
    for spk in cfg.adapt_speaker_ids():
        corpus = sd.gen_corpus(spec, 1, ex.ADAPT_POOL + ex.EVAL_COUNT,
                               first_speaker=spk)
        pool = sd.strip_transcripts(corpus, spk)[: ex.ADAPT_POOL]
        evals = sd.Corpus(spec, corpus.of_speaker(spk)[ex.ADAPT_POOL:])
        pool_name = f"adapt_{spk}_pool.corpus"
        eval_name = f"adapt_{spk}_eval.corpus"
        sd.save_corpus(pool, out / pool_name, spec=spec)
        sd.save_corpus(evals, out / eval_name)
        manifest["adaptation"][str(spk)] = {
            "pool": pool_name, "n_pool": len(pool),
            "eval": eval_name, "eval_hash": sd.corpus_hash(evals),
        }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _echo_config(cfg, out)
    _say(f"wrote corpus for {len(source.speakers())} source and "
         f"{len(manifest['adaptation'])} adaptation speakers to {out}")


def cmd_train_source(args):
    cfg = _load_cfg(args)
    corpus = sd.load_corpus(_resolve_corpus(args.corpus),
                            expect_mel_dim=cfg.model.mel_dim)
    if not isinstance(corpus, sd.Corpus):
        raise ConfigError("source training needs a transcript-bearing corpus")
    plan = cfg.source_plan(args.variant)
    ckpt, metrics = pl.train_source(corpus, cfg.model, plan)
    save_checkpoint(ckpt, args.out)
    pl.write_metrics(metrics, str(args.out) + ".metrics.csv")
    _echo_config(cfg, args.out)
    _chat(f"final losses: {_tail_losses(metrics, plan.stage)}")
    _say(f"trained source model ({plan.steps} steps) -> {args.out}")


def cmd_align(args):
    cfg = _load_cfg(args)
    ckpt_in = load_checkpoint(args.ckpt)
    corpus = sd.load_corpus(_resolve_corpus(args.corpus),
                            expect_mel_dim=cfg.model.mel_dim)
    if not isinstance(corpus, sd.Corpus):
        raise ConfigError("aligning needs the transcript-bearing source corpus")
    plan = cfg.align_plan(args.variant)
    ckpt, metrics = pl.align_mel_encoder(ckpt_in, corpus, plan)
    save_checkpoint(ckpt, args.out)
    pl.write_metrics(metrics, str(args.out) + ".metrics.csv")
    _echo_config(cfg, args.out)
    _chat(f"final losses: {_tail_losses(metrics, plan.stage)}")
    _say(f"aligned mel encoder ({plan.steps} steps) -> {args.out}")


def cmd_adapt(args):
    cfg = _load_cfg(args)
    ckpt_in = load_checkpoint(args.ckpt)
    corpus_path = _resolve_corpus(args.corpus,
                                  default_name=f"adapt_{args.speaker}_pool.corpus")
    records = sd.load_corpus(corpus_path)
    if isinstance(records, sd.Corpus):
        raise ConfigError(
            f"{corpus_path} carries transcripts; adaptation consumes mel-only "
            f"records (strip-transcripts produces them)")
    records = [r for r in records if r.speaker_id == args.speaker]
    if len(records) < args.n_utts:
        raise ConfigError(f"asked for {args.n_utts} utterances of speaker "
                          f"{args.speaker}, corpus holds {len(records)}")
    plan = cfg.adapt_plan(args.variant)
    ckpt, metrics = pl.adapt_untranscribed(ckpt_in, records[: args.n_utts], plan)
    save_checkpoint(ckpt, args.out)
    pl.write_metrics(metrics, str(args.out) + ".metrics.csv")
    _echo_config(cfg, args.out)
    _chat(f"consumed fields: {ckpt.provenance.get('field_audit')}")
    _say(f"adapted to speaker {args.speaker} with {args.n_utts} utterances "
         f"-> {args.out}")


def cmd_synthesize(args):
    ckpt = load_checkpoint(args.ckpt)
    text = Path(args.text_file).read_text()
    try:
        phonemes = [int(tok) for tok in text.split()]
    except ValueError as exc:
        raise ConfigError(f"{args.text_file}: phoneme ids must be integers "
                          f"({exc})") from None
    if not phonemes:
        raise ConfigError(f"{args.text_file}: no phoneme ids")
    vocab = ckpt.config.phoneme_vocab_size
    bad = [p for p in phonemes if not 0 <= p < vocab]
    if bad:
        raise ConfigError(f"phoneme ids {bad} outside vocabulary 0..{vocab - 1}")
    mel = pl.synthesize(ckpt, np.asarray(phonemes, dtype=np.int64), args.speaker)
    save_mel(mel, args.out, args.speaker)
    _say(f"synthesized {mel.shape[0]} frames x {mel.shape[1]} dims -> {args.out}")


def cmd_eval(args):
    corpus = sd.load_corpus(_resolve_corpus(args.corpus))
    if not isinstance(corpus, sd.Corpus):
        raise ConfigError("evaluation needs a transcript-bearing corpus "
                          "(references come from it)")
    names, seen = [], set()
    for path in args.arms:
        stem = Path(path).stem
        name = stem
        k = 2
        while name in seen:
            name = f"{stem}#{k}"
            k += 1
        seen.add(name)
        names.append(name)
    speakers = corpus.speakers()
    values = {}
    for name, path in zip(names, args.arms):
        ckpt = load_checkpoint(path)
        per_metric = {m: {} for m in ex.EVAL_METRICS}
        for utt in corpus.utterances:
            mel = pl.synthesize(ckpt, utt.phonemes, utt.speaker_id)
            uid = ex._utt_uid(utt.speaker_id, utt.utterance_id)
            per_metric["mel_mae"][uid] = mel_distance(mel, utt.mel).value
            per_metric["proximity"][uid] = speaker_proximity(
                mel, utt.speaker_id, corpus.spec, speakers)
        values[name] = per_metric
        _chat(f"evaluated {name} on {len(corpus.utterances)} utterances")
    rows = []
    for name in names:
        for metric in ex.EVAL_METRICS:
            per = values[name][metric]
            rows.extend((uid, name, metric, per[uid]) for uid in sorted(per))
    write_report_csv(rows, args.report)
    _say(f"wrote {len(rows)} metric rows -> {args.report}")
    if len(names) == 2:
        lines = []
        for metric in ex.EVAL_METRICS:
            rep = paired_report(names[0], values[names[0]][metric],
                                names[1], values[names[1]][metric], metric=metric)
            lines.append(rep.summary())
        summary_path = Path(str(args.report) + ".summary.txt")
        summary_path.write_text("\n".join(lines) + "\n")
        for line in lines:
            _say(line)


def cmd_experiment(args):
    cfg = _load_cfg(args)
    out = Path(args.out) if args.out else Path("runs") / f"{args.recipe}-seed{args.seed}"
    result = ex.run_experiment(args.recipe, cfg, seed=args.seed, out_dir=out)
    for line in result.summaries:
        _say(line)
    _say(f"experiment '{args.recipe}' (seed {args.seed}) -> {out}")


def cmd_strip_transcripts(args):
    corpus = sd.load_corpus(_resolve_corpus(args.corpus))
    if not isinstance(corpus, sd.Corpus):
        raise ConfigError("corpus is already mel-only")
    records = sd.strip_transcripts(corpus, args.speaker)
    sd.save_corpus(records, args.out, spec=corpus.spec)
    _say(f"stripped {len(records)} records of speaker {args.speaker} -> {args.out}")


def _build_parser():
    p = argparse.ArgumentParser(
        prog="meladapt",
        description="Custom-voice TTS adaptation from untranscribed speech, "
                    "on a synthetic oracle corpus.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-corpus", cmd_gen_corpus, "generate the synthetic corpus")
    sp.add_argument("--config", help="config file (defaults to desk profile)")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("train-source", cmd_train_source, "stage 1: multi-speaker source training")
    sp.add_argument("--corpus", required=True, help="corpus dir or file")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--variant", default="main", choices=["main", "joint_training"])

    sp = add("align-mel-encoder", cmd_align, "stage 2: fit mel encoder to the "
             "phoneme latent space")
    sp.add_argument("--ckpt", required=True, help="source checkpoint")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", default="main", choices=["main", "no_l2"])

    sp = add("adapt", cmd_adapt, "stage 3: untranscribed speaker adaptation")
    sp.add_argument("--ckpt", required=True, help="aligned checkpoint")
    sp.add_argument("--corpus", required=True, help="mel-only corpus dir or file")
    sp.add_argument("--speaker", required=True, type=int)
    sp.add_argument("--n-utts", required=True, type=int)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", default="main",
                    choices=["main", "finetune_mel_encoder_and_decoder"])

    sp = add("synthesize", cmd_synthesize, "stage 4: mel from phoneme ids")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--text-file", required=True,
                    help="whitespace-separated phoneme ids")
    sp.add_argument("--speaker", required=True, type=int)
    sp.add_argument("--out", required=True, help="mel container path")

    sp = add("eval", cmd_eval, "objective metrics for one or more checkpoints")
    sp.add_argument("--arms", required=True, nargs="+", help="checkpoint paths")
    sp.add_argument("--corpus", required=True, help="reference corpus")
    sp.add_argument("--report", required=True, help="CSV output path")

    sp = add("experiment", cmd_experiment, "full paired recipe, seeded")
    sp.add_argument("--recipe", required=True,
                    choices=["main", "joint", "no-l2", "finetune-all", "data-sweep"])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config")
    sp.add_argument("--out", help="output directory (default runs/<recipe>-seed<n>)")

    sp = add("strip-transcripts", cmd_strip_transcripts,
             "drop transcript fields from one speaker's records")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--speaker", required=True, type=int)
    sp.add_argument("--out", required=True)

    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        args.func(args)
    except MelAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
