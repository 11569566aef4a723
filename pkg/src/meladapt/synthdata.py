"""Deterministic synthetic speech stand-in with a known ground truth.

Every record is a pure function of (spec, speaker_id, utterance_id): phoneme
prototypes and per-speaker voice transforms are derived from the OracleSpec
seed through fixed SeedSequence spawn keys, never from shared mutable state. With
noise_sigma = 0 the mel depends only on (speaker, phonemes, durations).
"""

import hashlib
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import binio
from .errors import CheckpointFormatError, ConfigError

CORPUS_MAGIC = b"MACORP\x00\x01"
CORPUS_VERSION = 1

# generator shape constants: tuned once, part of the data format
_MIN_LEN, _MAX_LEN = 5, 20
_BASE_DUR_LO, _BASE_DUR_HI = 2, 6
_SPEAKER_MIX = 0.15        # off-identity strength of the per-speaker linear map
_PROFILE_STD = 0.5
_DUR_SCALE_LO, _DUR_SCALE_HI = 0.7, 1.4
_PITCH_OFFSET_STD = 0.3
_VIBRATO_AMP = 0.1
_VIBRATO_PERIOD = 9.0
_PITCH_MIX = 0.3           # weight of the pitch-correlated mel component


@dataclass(frozen=True)
class OracleSpec:
    seed: int = 0
    phoneme_vocab_size: int = 24
    mel_dim: int = 16
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.phoneme_vocab_size < 1 or self.mel_dim < 1:
            raise ConfigError("vocab and mel sizes must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


def _rng(spec, *key):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=key)
    )


@lru_cache(maxsize=32)
def _phoneme_tables(spec):
    protos = np.empty((spec.phoneme_vocab_size, spec.mel_dim))
    base_dur = np.empty(spec.phoneme_vocab_size, dtype=np.int64)
    pitch_level = np.empty(spec.phoneme_vocab_size)
    smooth = np.array([0.25, 0.5, 0.25])
    for pid in range(spec.phoneme_vocab_size):
        rng = _rng(spec, 0, pid)
        raw = rng.normal(size=spec.mel_dim)
        for _ in range(2):  # mild smoothing across mel bins
            raw = np.convolve(raw, smooth, mode="same")
        protos[pid] = raw * 1.5
        base_dur[pid] = rng.integers(_BASE_DUR_LO, _BASE_DUR_HI + 1)
        pitch_level[pid] = rng.normal()
    return protos, base_dur, pitch_level


@lru_cache(maxsize=256)
def _speaker_voice(spec, speaker_id):
    rng = _rng(spec, 1, speaker_id)
    g = rng.normal(size=(spec.mel_dim, spec.mel_dim))
    transform = np.eye(spec.mel_dim) + _SPEAKER_MIX * g / np.sqrt(spec.mel_dim)
    profile = rng.normal(scale=_PROFILE_STD, size=spec.mel_dim)
    dur_scale = rng.uniform(_DUR_SCALE_LO, _DUR_SCALE_HI)
    pitch_offset = rng.normal(scale=_PITCH_OFFSET_STD)
    vibrato_phase = rng.uniform(0.0, 2.0 * np.pi)
    return transform, profile, dur_scale, pitch_offset, vibrato_phase


@lru_cache(maxsize=8)
def _pitch_direction(spec):
    v = _rng(spec, 3).normal(size=spec.mel_dim)
    return v / np.linalg.norm(v)


@dataclass
class Utterance:
    speaker_id: int
    utterance_id: int
    phonemes: np.ndarray   # [L] int64
    durations: np.ndarray  # [L] int64 frames
    pitch: np.ndarray      # [T] float64
    mel: np.ndarray        # [T x mel_dim] float64
    transcript_present: bool = True

    def __post_init__(self):
        if int(self.durations.sum()) != self.mel.shape[0]:
            raise ConfigError(
                f"durations sum {int(self.durations.sum())} != {self.mel.shape[0]} frames"
            )
        if not np.isfinite(self.mel).all():
            raise ConfigError("non-finite mel")


@dataclass
class MelOnlyUtterance:
    """Adaptation-side record: no phoneme, duration, or pitch field exists."""

    speaker_id: int
    utterance_id: int
    mel: np.ndarray


def speaker_durations(spec, speaker_id, phonemes) -> np.ndarray:
    _, base_dur, _ = _phoneme_tables(spec)
    _, _, dur_scale, _, _ = _speaker_voice(spec, speaker_id)
    return np.maximum(1, np.rint(dur_scale * base_dur[phonemes])).astype(np.int64)


def render(spec, speaker_id, phonemes, durations=None):
    """Noise-free ground truth for arbitrary text: returns (durations, pitch, mel).

    This is the oracle the evaluation side compares synthesized mels against.
    """
    phonemes = np.asarray(phonemes)
    if phonemes.size == 0 or phonemes.min() < 0 or phonemes.max() >= spec.phoneme_vocab_size:
        raise ConfigError("phoneme ids outside oracle vocabulary")
    protos, _, pitch_level = _phoneme_tables(spec)
    transform, profile, _, pitch_offset, phase = _speaker_voice(spec, speaker_id)
    if durations is None:
        durations = speaker_durations(spec, speaker_id, phonemes)
    else:
        durations = np.asarray(durations, dtype=np.int64)
    T = int(durations.sum())

    t = np.arange(T, dtype=np.float64)
    span_of_frame = np.repeat(np.arange(phonemes.size), durations)
    pitch = (pitch_level[phonemes][span_of_frame] + pitch_offset
             + _VIBRATO_AMP * np.sin(2.0 * np.pi * t / _VIBRATO_PERIOD + phase))

    starts = np.concatenate([[0], np.cumsum(durations)[:-1]])
    centers = starts + (durations - 1) / 2.0
    base = np.empty((T, spec.mel_dim))
    for j in range(spec.mel_dim):
        base[:, j] = np.interp(t, centers, protos[phonemes, j])

    mel = (base @ transform.T + profile
           + _PITCH_MIX * np.outer(pitch, _pitch_direction(spec)))
    return durations, pitch, mel


def gen_utterance(spec, speaker_id, utterance_id) -> Utterance:
    rng = _rng(spec, 2, speaker_id, utterance_id)
    L = int(rng.integers(_MIN_LEN, _MAX_LEN + 1))
    phonemes = rng.integers(0, spec.phoneme_vocab_size, size=L)
    durations, pitch, mel = render(spec, speaker_id, phonemes)
    if spec.noise_sigma > 0:
        mel = mel + spec.noise_sigma * rng.normal(size=mel.shape)
    return Utterance(speaker_id=speaker_id, utterance_id=utterance_id,
                     phonemes=phonemes, durations=durations, pitch=pitch, mel=mel)


@dataclass
class Corpus:
    spec: OracleSpec
    utterances: list = field(default_factory=list)

    def speakers(self):
        return sorted({u.speaker_id for u in self.utterances})

    def of_speaker(self, speaker_id):
        return [u for u in self.utterances if u.speaker_id == speaker_id]

    def _split(self, which):
        out = []
        for s in self.speakers():
            utts = self.of_speaker(s)
            n_eval = max(1, int(round(0.2 * len(utts)))) if len(utts) > 1 else 0
            cut = len(utts) - n_eval
            out.extend(utts[:cut] if which == "train" else utts[cut:])
        return Corpus(self.spec, out)

    def train_split(self):
        return self._split("train")

    def eval_split(self):
        """Per speaker, the last 20 percent of records (at least one)."""
        return self._split("eval")


def gen_corpus(spec, n_speakers, utts_per_speaker, first_speaker=0) -> Corpus:
    if n_speakers < 1:
        raise ConfigError("need at least one speaker")
    utts = [
        gen_utterance(spec, s, u)
        for s in range(first_speaker, first_speaker + n_speakers)
        for u in range(utts_per_speaker)
    ]
    return Corpus(spec, utts)


def strip_transcripts(corpus, speaker_id) -> list:
    """Mel-only records for one speaker: the transcript fields do not exist
    on the output type, so downstream code cannot read them even by accident."""
    utts = corpus.of_speaker(speaker_id)
    if not utts:
        raise ConfigError(f"speaker {speaker_id} has no utterances in this corpus")
    return [MelOnlyUtterance(u.speaker_id, u.utterance_id, u.mel.copy()) for u in utts]


# -- container i/o ---------------------------------------------------------


def _record_meta(u):
    if isinstance(u, Utterance):
        return {"kind": "full", "speaker_id": int(u.speaker_id),
                "utterance_id": int(u.utterance_id),
                "transcript_present": bool(u.transcript_present)}
    return {"kind": "mel_only", "speaker_id": int(u.speaker_id),
            "utterance_id": int(u.utterance_id)}


def _spec_meta(spec):
    return {"seed": spec.seed, "phoneme_vocab_size": spec.phoneme_vocab_size,
            "mel_dim": spec.mel_dim, "noise_sigma": spec.noise_sigma}


def save_corpus(corpus_or_records, path, spec=None):
    """Accepts a Corpus or a list of MelOnlyUtterance (then `spec` required)."""
    if isinstance(corpus_or_records, Corpus):
        spec = corpus_or_records.spec
        records = corpus_or_records.utterances
    else:
        if spec is None:
            raise ConfigError("mel-only record list needs an explicit spec")
        records = corpus_or_records
    meta = {"spec": _spec_meta(spec), "records": [_record_meta(u) for u in records]}
    arrays = {}
    for i, u in enumerate(records):
        tag = f"u{i:06d}"
        arrays[f"{tag}.mel"] = u.mel
        if isinstance(u, Utterance):
            arrays[f"{tag}.phonemes"] = u.phonemes
            arrays[f"{tag}.durations"] = u.durations
            arrays[f"{tag}.pitch"] = u.pitch
    binio.write_container(path, CORPUS_MAGIC, CORPUS_VERSION, meta, arrays)


def load_corpus(path, expect_mel_dim=None):
    """Returns a Corpus (full records) or a list of MelOnlyUtterance."""
    meta, arrays = binio.read_container(path, CORPUS_MAGIC, CORPUS_VERSION)
    try:
        spec = OracleSpec(**meta["spec"])
        record_meta = meta["records"]
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed corpus meta: {exc}") from exc
    if expect_mel_dim is not None and spec.mel_dim != expect_mel_dim:
        raise CheckpointFormatError(
            f"{path}: corpus mel_dim {spec.mel_dim}, configuration wants {expect_mel_dim}"
        )
    records = []
    kinds = set()
    for i, rm in enumerate(record_meta):
        tag = f"u{i:06d}"
        kinds.add(rm["kind"])
        try:
            if rm["kind"] == "full":
                records.append(Utterance(
                    speaker_id=rm["speaker_id"], utterance_id=rm["utterance_id"],
                    phonemes=arrays[f"{tag}.phonemes"],
                    durations=arrays[f"{tag}.durations"],
                    pitch=arrays[f"{tag}.pitch"], mel=arrays[f"{tag}.mel"],
                    transcript_present=rm.get("transcript_present", True)))
            elif rm["kind"] == "mel_only":
                records.append(MelOnlyUtterance(
                    rm["speaker_id"], rm["utterance_id"], arrays[f"{tag}.mel"]))
            else:
                raise CheckpointFormatError(f"{path}: unknown record kind {rm['kind']!r}")
        except KeyError as exc:
            raise CheckpointFormatError(f"{path}: record {i} missing array {exc}") from exc
    if kinds == {"mel_only"}:
        return records
    if "mel_only" in kinds:
        raise CheckpointFormatError(f"{path}: mixed full and mel-only records")
    return Corpus(spec, records)


def corpus_hash(corpus) -> str:
    """Stable content hash used to pin the reference corpus in the repo."""
    h = hashlib.sha256()
    h.update(binio._canonical_json(_spec_meta(corpus.spec)))
    for u in corpus.utterances:
        h.update(binio._canonical_json(_record_meta(u)))
        for arr in (u.phonemes, u.durations, u.pitch, u.mel):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
