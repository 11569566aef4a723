"""Feed-forward transformer TTS backbone with speaker-conditional layer norm.

One flat parameter registry covers the whole system, including the mel
encoder, so that freezing and checkpointing can work on names alone. Every
parameter name maps to exactly one group label via `group_of`.
"""

from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError, ShapeError

GROUPS = (
    "PhonemeEncoder",
    "DurationPredictor",
    "PitchPredictor",
    "AcousticCondition",
    "DecoderCore",
    "ConditionalLN",
    "MelLinear",
    "SpeakerTable",
    "MelEncoder",
)


@dataclass(frozen=True)
class ModelConfig:
    phoneme_vocab_size: int = 24
    hidden_dim: int = 32
    n_heads: int = 2
    ffn_filter: int = 64
    conv_kernel: int = 9
    n_encoder_blocks: int = 4
    n_decoder_blocks: int = 4
    n_mel_encoder_blocks: int = 4
    mel_dim: int = 16
    n_speakers: int = 10
    speaker_embedding_dim: int = 16
    max_duration: int = 10
    predictor_kernel: int = 3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        for k in ("conv_kernel", "predictor_kernel"):
            if getattr(self, k) % 2 == 0:
                raise ConfigError(f"{k} must be odd, got {getattr(self, k)}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class SpeakerContext:
    """Carrier for the conditioning input consumed by conditional layer norm."""

    speaker_id: int
    embedding: Tensor  # [1 x speaker_embedding_dim] row, live view of the table


@lru_cache(maxsize=256)
def _posenc_cached(T, d):
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)  # shared cache entry, callers must not mutate
    return pe


def positional_encoding(T, d):
    return _posenc_cached(int(T), int(d))


def group_of(name: str) -> str:
    """Map a parameter name to its group label. Unknown names are an error."""
    if name == "phoneme_embed" or name.startswith("enc."):
        return "PhonemeEncoder"
    if name.startswith("dur."):
        return "DurationPredictor"
    if name.startswith("pitch."):
        return "PitchPredictor"
    if name.startswith("acou."):
        return "AcousticCondition"
    if name.startswith("dec."):
        if ".cln" in name:
            return "ConditionalLN"
        return "DecoderCore"
    if name.startswith("mel_out."):
        return "MelLinear"
    if name == "speaker_table":
        return "SpeakerTable"
    if name.startswith("melenc."):
        return "MelEncoder"
    raise ConfigError(f"parameter name '{name}' belongs to no group")


class TtsModel:
    """Owns the parameter registry; all forward helpers below take the model."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(seed))

    # -- construction ------------------------------------------------------

    def _add(self, name, data):
        assert name not in self.params
        self.params[name] = Tensor(data, requires_grad=True)

    def _mat(self, rng, name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        self._add(name, rng.uniform(-bound, bound, size=shape))

    def _zeros(self, name, shape):
        self._add(name, np.zeros(shape))

    def _ones(self, name, shape):
        self._add(name, np.ones(shape))

    def _build_fft_block(self, rng, prefix, conditional):
        c = self.config
        d = c.hidden_dim
        for part in ("wq", "wk", "wv", "wo"):
            self._mat(rng, f"{prefix}.attn.{part}", (d, d), d)
        for part in ("bq", "bk", "bv", "bo"):
            self._zeros(f"{prefix}.attn.{part}", (d,))
        k = c.conv_kernel
        self._mat(rng, f"{prefix}.ffn.k1", (k, d, c.ffn_filter), k * d)
        self._zeros(f"{prefix}.ffn.b1", (c.ffn_filter,))
        self._mat(rng, f"{prefix}.ffn.k2", (k, c.ffn_filter, d), k * c.ffn_filter)
        self._zeros(f"{prefix}.ffn.b2", (d,))
        for site in ("1", "2"):
            if conditional:
                # degenerate start: acts as plain layer norm for every speaker
                self._zeros(f"{prefix}.cln{site}.w_scale", (c.speaker_embedding_dim, d))
                self._ones(f"{prefix}.cln{site}.b_scale", (d,))
                self._zeros(f"{prefix}.cln{site}.w_bias", (c.speaker_embedding_dim, d))
                self._zeros(f"{prefix}.cln{site}.b_bias", (d,))
            else:
                self._ones(f"{prefix}.ln{site}.gamma", (d,))
                self._zeros(f"{prefix}.ln{site}.beta", (d,))

    def _build_predictor(self, rng, prefix, out_dim):
        c = self.config
        d, pk = c.hidden_dim, c.predictor_kernel
        for i in ("1", "2"):
            self._mat(rng, f"{prefix}.c{i}.kernel", (pk, d, d), pk * d)
            self._zeros(f"{prefix}.c{i}.bias", (d,))
            self._ones(f"{prefix}.ln{i}.gamma", (d,))
            self._zeros(f"{prefix}.ln{i}.beta", (d,))
        self._mat(rng, f"{prefix}.out.w", (d, out_dim), d)
        self._zeros(f"{prefix}.out.b", (out_dim,))

    def _build(self, rng):
        c = self.config
        d = c.hidden_dim
        self._add("phoneme_embed", rng.normal(size=(c.phoneme_vocab_size, d)))
        for i in range(c.n_encoder_blocks):
            self._build_fft_block(rng, f"enc.{i}", conditional=False)
        self._build_predictor(rng, "dur", 1)
        self._build_predictor(rng, "pitch", 1)
        self._mat(rng, "pitch.proj.w", (1, d), 1)
        self._zeros("pitch.proj.b", (d,))
        self._mat(rng, "acou.ext1.kernel", (3, c.mel_dim, d), 3 * c.mel_dim)
        self._zeros("acou.ext1.bias", (d,))
        self._mat(rng, "acou.ext2.kernel", (3, d, d), 3 * d)
        self._zeros("acou.ext2.bias", (d,))
        self._mat(rng, "acou.dense.w", (d, d), d)
        self._zeros("acou.dense.b", (d,))
        self._mat(rng, "acou.pred1.kernel", (3, d, d), 3 * d)
        self._zeros("acou.pred1.bias", (d,))
        self._mat(rng, "acou.pred2.kernel", (3, d, d), 3 * d)
        self._zeros("acou.pred2.bias", (d,))
        for i in range(c.n_decoder_blocks):
            self._build_fft_block(rng, f"dec.{i}", conditional=True)
        self._mat(rng, "mel_out.w", (d, c.mel_dim), d)
        self._zeros("mel_out.b", (c.mel_dim,))
        self._add("speaker_table",
                  rng.normal(scale=0.5, size=(c.n_speakers, c.speaker_embedding_dim)))
        self._mat(rng, "melenc.in.w", (c.mel_dim, d), c.mel_dim)
        self._zeros("melenc.in.b", (d,))
        for i in range(c.n_mel_encoder_blocks):
            self._build_fft_block(rng, f"melenc.{i}", conditional=False)

    # -- bookkeeping -------------------------------------------------------

    def groups(self) -> dict:
        out = {g: [] for g in GROUPS}
        for name in self.params:
            out[group_of(name)].append(name)
        return out

    def set_trainable(self, groups):
        """Restrict requires_grad to the given group labels (exactly)."""
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups: {sorted(unknown)}")
        for name, t in self.params.items():
            t.requires_grad = group_of(name) in groups
            t.grad = None

    def trainable_params(self) -> dict:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def speaker_context(self, speaker_id: int) -> SpeakerContext:
        table = self.params["speaker_table"]
        if not 0 <= speaker_id < table.shape[0]:
            raise ConfigError(
                f"speaker id {speaker_id} outside table of {table.shape[0]} rows"
            )
        emb = ad.gather_rows(table, np.array([speaker_id]))
        return SpeakerContext(speaker_id, emb)


# -- sub-ops ---------------------------------------------------------------


def conditional_layer_norm(x, speaker, model, prefix):
    """layer_norm(x) * scale(e) + bias(e), scale/bias from two linear maps."""
    p = model.params
    e = speaker.embedding
    if e.shape[1] != p[f"{prefix}.w_scale"].shape[0]:
        raise ShapeError(
            f"speaker embedding dim {e.shape[1]} != conditioning map input "
            f"{p[f'{prefix}.w_scale'].shape[0]}"
        )
    scale = ad.add(ad.matmul(e, p[f"{prefix}.w_scale"]), p[f"{prefix}.b_scale"])
    bias = ad.add(ad.matmul(e, p[f"{prefix}.w_bias"]), p[f"{prefix}.b_bias"])
    return ad.add(ad.mul(ad.layer_norm(x), scale), bias)


def _norm(x, model, prefix, site, speaker):
    if f"{prefix}.cln{site}.w_scale" in model.params:
        if speaker is None:
            raise ConfigError(f"block {prefix} needs a speaker context")
        return conditional_layer_norm(x, speaker, model, f"{prefix}.cln{site}")
    if speaker is not None:
        raise ConfigError(f"speaker supplied to block {prefix} without conditioning")
    p = model.params
    return ad.layer_norm(x, p[f"{prefix}.ln{site}.gamma"], p[f"{prefix}.ln{site}.beta"])


def _attention(x, model, prefix):
    p = model.params
    c = model.config
    dh = c.hidden_dim // c.n_heads
    q = ad.add(ad.matmul(x, p[f"{prefix}.attn.wq"]), p[f"{prefix}.attn.bq"])
    k = ad.add(ad.matmul(x, p[f"{prefix}.attn.wk"]), p[f"{prefix}.attn.bk"])
    v = ad.add(ad.matmul(x, p[f"{prefix}.attn.wv"]), p[f"{prefix}.attn.bv"])
    heads = []
    for h in range(c.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qs, ks, vs = (ad.slice_cols(t, lo, hi) for t in (q, k, v))
        scores = ad.smul(ad.matmul(qs, ad.transpose(ks)), dh ** -0.5)
        heads.append(ad.matmul(ad.softmax(scores, axis=1), vs))
    cat = heads[0] if len(heads) == 1 else ad.concat_cols(heads)
    return ad.add(ad.matmul(cat, p[f"{prefix}.attn.wo"]), p[f"{prefix}.attn.bo"])


def fft_block(x, model, prefix, speaker=None):
    """Pre-norm residual block: attention then conv feed-forward.

    Zeroed output projections make the whole block an exact identity.
    """
    p = model.params
    a = ad.add(x, _attention(_norm(x, model, prefix, "1", speaker), model, prefix))
    h = _norm(a, model, prefix, "2", speaker)
    f = ad.conv1d(ad.relu(ad.conv1d(h, p[f"{prefix}.ffn.k1"], p[f"{prefix}.ffn.b1"])),
                  p[f"{prefix}.ffn.k2"], p[f"{prefix}.ffn.b2"])
    return ad.add(a, f)


def encode_phonemes(model, phoneme_ids) -> Tensor:
    ids = np.asarray(phoneme_ids)
    if ids.size == 0:
        raise ConfigError("empty phoneme sequence")
    h = ad.embedding(model.params["phoneme_embed"], ids)
    h = ad.add(h, Tensor(positional_encoding(ids.size, model.config.hidden_dim)))
    for i in range(model.config.n_encoder_blocks):
        h = fft_block(h, model, f"enc.{i}")
    return h


def length_regulate(h: Tensor, durations) -> Tensor:
    dur = np.asarray(durations)
    if dur.shape != (h.shape[0],):
        raise ShapeError(f"{dur.shape[0] if dur.ndim else 0} durations for {h.shape[0]} rows")
    if np.any(dur < 0):
        raise ConfigError("negative duration")
    total = int(dur.sum())
    if total == 0:
        raise ConfigError("all durations zero: empty expansion")
    return ad.gather_rows(h, np.repeat(np.arange(h.shape[0]), dur))


def _predictor(x, model, prefix):
    p = model.params
    for i in ("1", "2"):
        x = ad.conv1d(x, p[f"{prefix}.c{i}.kernel"], p[f"{prefix}.c{i}.bias"])
        x = ad.layer_norm(ad.relu(x), p[f"{prefix}.ln{i}.gamma"], p[f"{prefix}.ln{i}.beta"])
    return ad.add(ad.matmul(x, p[f"{prefix}.out.w"]), p[f"{prefix}.out.b"])


def duration_predictor(model, h) -> Tensor:
    """Per-phoneme predictions in the log(frames+1) domain, shape [L x 1]."""
    return _predictor(h, model, "dur")


def durations_from_log(model, log_pred) -> np.ndarray:
    data = log_pred.data if isinstance(log_pred, Tensor) else np.asarray(log_pred)
    if not np.isfinite(data).all():
        raise NumericError("non-finite duration prediction")
    frames = np.rint(np.exp(data.reshape(-1)) - 1.0)
    return np.clip(frames, 1, model.config.max_duration).astype(np.int64)


def pitch_predictor(model, h_expanded) -> Tensor:
    """Frame-level scalar pitch predictions, shape [T x 1]."""
    return _predictor(h_expanded, model, "pitch")


def pitch_pathway(model, h_expanded, pitch) -> Tensor:
    """Project the pitch scalar to hidden size and add it to every frame."""
    if pitch.shape != (h_expanded.shape[0], 1):
        raise ShapeError(f"pitch shape {pitch.shape} for {h_expanded.shape[0]} frames")
    p = model.params
    return ad.add(h_expanded,
                  ad.add(ad.matmul(pitch, p["pitch.proj.w"]), p["pitch.proj.b"]))


def acoustic_extract(model, mel) -> Tensor:
    p = model.params
    T = mel.shape[0]
    # replicate-pad by the two convs' receptive margin so edge frames never
    # see the zero pad: constant input then yields constant features
    margin = 2
    idx = np.concatenate([np.zeros(margin, dtype=np.int64), np.arange(T),
                          np.full(margin, T - 1, dtype=np.int64)])
    x = ad.gather_rows(mel, idx)
    f = ad.relu(ad.conv1d(x, p["acou.ext1.kernel"], p["acou.ext1.bias"]))
    f = ad.conv1d(f, p["acou.ext2.kernel"], p["acou.ext2.bias"])
    return ad.gather_rows(f, np.arange(margin, margin + T))


def _mean_rows_matrix(T):
    return Tensor(np.full((1, T), 1.0 / T))


def acoustic_condition(model, mel, durations):
    """Pool per-frame acoustic features globally and per phoneme span.

    Returns (utterance_vec [1 x d], phoneme_vecs [L x d]); a single span
    covering the whole utterance makes the two pools identical.
    """
    dur = np.asarray(durations)
    T = mel.shape[0]
    if int(dur.sum()) != T:
        raise ShapeError(f"durations sum {int(dur.sum())} != {T} mel frames")
    feats = acoustic_extract(model, mel)
    pool = np.zeros((dur.size, T))
    start = 0
    for i, n in enumerate(dur):
        if n > 0:
            pool[i, start:start + n] = 1.0 / n
        start += n
    utterance_vec = ad.matmul(_mean_rows_matrix(T), feats)
    phoneme_vecs = ad.matmul(Tensor(pool), feats)
    return utterance_vec, phoneme_vecs


def acoustic_predict(model, h_phoneme) -> Tensor:
    """Regress per-phoneme acoustic vectors from phoneme-encoder hiddens."""
    p = model.params
    f = ad.relu(ad.conv1d(h_phoneme, p["acou.pred1.kernel"], p["acou.pred1.bias"]))
    return ad.conv1d(f, p["acou.pred2.kernel"], p["acou.pred2.bias"])


def acoustic_additions(model, x, frame_vecs, utterance_vec):
    """Add the dense-mapped frame-level vectors and the utterance vector."""
    p = model.params
    dense = ad.add(ad.matmul(frame_vecs, p["acou.dense.w"]), p["acou.dense.b"])
    return ad.add(ad.add(x, dense), utterance_vec)


def decode(model, x, speaker) -> Tensor:
    x = ad.add(x, Tensor(positional_encoding(x.shape[0], model.config.hidden_dim)))
    for i in range(model.config.n_decoder_blocks):
        x = fft_block(x, model, f"dec.{i}", speaker)
    p = model.params
    return ad.add(ad.matmul(x, p["mel_out.w"]), p["mel_out.b"])


@dataclass
class ForwardResult:
    mel: Tensor                      # [T x mel_dim]
    log_duration: Tensor             # [L x 1]
    pitch_pred: Tensor               # [T x 1]
    durations: np.ndarray            # [L] frames actually used
    expanded_hidden: Tensor          # [T x d], pre pitch/acoustic additions
    acoustic_target: Tensor = None   # [L x d] extracted vecs (teacher forcing)
    acoustic_pred: Tensor = None     # [L x d] predictor output


def tts_forward(model, phoneme_ids, speaker, durations=None, pitch=None,
                mel_target=None) -> ForwardResult:
    """Transcript-side synthesis path.

    Oracle `durations`/`pitch` and a `mel_target` (for extracting acoustic
    conditions) switch the variance inputs to teacher forcing; with all three
    omitted every variance input is predicted, which is the inference mode.
    """
    h = encode_phonemes(model, phoneme_ids)
    log_dur = duration_predictor(model, h)
    if durations is None:
        dur_used = durations_from_log(model, log_dur)
    else:
        dur_used = np.asarray(durations, dtype=np.int64)
    h_reg = length_regulate(h, dur_used)
    T = h_reg.shape[0]
    pitch_pred = pitch_predictor(model, h_reg)
    if pitch is None:
        pitch_used = pitch_pred
    else:
        arr = np.asarray(pitch, dtype=np.float64).reshape(-1, 1)
        if arr.shape[0] != T:
            raise ShapeError(f"{arr.shape[0]} pitch frames for {T} mel frames")
        pitch_used = Tensor(arr)
    x = pitch_pathway(model, h_reg, pitch_used)

    acoustic_target = None
    acoustic_pred = acoustic_predict(model, h)
    if mel_target is not None:
        utt_vec, phon_vecs = acoustic_condition(model, mel_target, dur_used)
        frame_vecs = length_regulate(phon_vecs, dur_used)
        acoustic_target = phon_vecs
    else:
        frame_vecs = length_regulate(acoustic_pred, dur_used)
        utt_vec = ad.matmul(_mean_rows_matrix(T), frame_vecs)
    x = acoustic_additions(model, x, frame_vecs, utt_vec)

    mel = decode(model, x, speaker)
    return ForwardResult(mel=mel, log_duration=log_dur, pitch_pred=pitch_pred,
                         durations=dur_used, expanded_hidden=h_reg,
                         acoustic_target=acoustic_target, acoustic_pred=acoustic_pred)
