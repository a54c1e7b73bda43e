"""Unified-vocabulary autoregressive transformer over text bytes, audio
codes, and motion codes.

One id space covers: 256 byte-level text ids | level-offset audio codes |
level-offset motion codes | control tokens (BOS, EOS, SEP_AUDIO, SEP_TEXT,
SEP_MOTION, PAD). Training runs in two stages — completion pretraining over
single-modality streams, then fine-tuning where the loss counts only the
positions that predict motion tokens (and the closing EOS). Generation
samples motion ids with forced validity: everything outside the motion
range except EOS is masked out of the softmax.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad, nn
from .archive import load_archive, save_archive
from .audio import AudioTokens
from .autodiff import Tensor
from .exceptions import FormatError, GesticulateError
from .rvq import MotionTokens

FORMAT_TAG = "lm-v1"
COMPLETION_TASKS = ("motion_completion", "audio_completion")
SFT_TASKS = ("audio_to_motion", "text_audio_to_motion")
TASKS = COMPLETION_TASKS + SFT_TASKS
CONTROL_NAMES = ("BOS", "EOS", "SEP_AUDIO", "SEP_TEXT", "SEP_MOTION", "PAD")


# -- vocabulary -----------------------------------------------------------------

@dataclass(frozen=True)
class VocabLayout:
    """Contiguous id ranges: text bytes, audio codes, motion codes, controls."""

    audio_codebook: int
    audio_levels: int
    motion_codebook: int
    motion_levels: int
    n_text: int = 256

    def __post_init__(self):
        for name in ("audio_codebook", "audio_levels", "motion_codebook",
                     "motion_levels", "n_text"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def text_base(self) -> int:
        return 0

    @property
    def audio_base(self) -> int:
        return self.n_text

    @property
    def motion_base(self) -> int:
        return self.audio_base + self.audio_codebook * self.audio_levels

    @property
    def control_base(self) -> int:
        return self.motion_base + self.motion_codebook * self.motion_levels

    @property
    def bos(self) -> int:
        return self.control_base

    @property
    def eos(self) -> int:
        return self.control_base + 1

    @property
    def sep_audio(self) -> int:
        return self.control_base + 2

    @property
    def sep_text(self) -> int:
        return self.control_base + 3

    @property
    def sep_motion(self) -> int:
        return self.control_base + 4

    @property
    def pad(self) -> int:
        return self.control_base + 5

    @property
    def vocab_size(self) -> int:
        return self.control_base + len(CONTROL_NAMES)

    # flattening: time-major, level-minor; each level gets its own id block
    def _flatten(self, codes: np.ndarray, base: int, k: int, levels: int,
                 what: str) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != levels or codes.shape[0] < 1:
            raise ValueError(f"{what} codes must be (S>=1, {levels}), got {codes.shape}")
        if codes.min() < 0 or codes.max() >= k:
            raise ValueError(f"{what} code out of [0, {k})")
        offsets = base + np.arange(levels) * k
        return (codes + offsets[None, :]).reshape(-1)

    def _unflatten(self, ids: np.ndarray, base: int, k: int, levels: int,
                   what: str) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0 or ids.size % levels != 0:
            raise FormatError(f"{what} segment of {ids.size} ids is not a "
                              f"whole number of {levels}-level timesteps")
        level = np.arange(ids.size) % levels
        lo = base + level * k
        bad = (ids < lo) | (ids >= lo + k)
        if np.any(bad):
            j = int(np.flatnonzero(bad)[0])
            raise FormatError(f"{what} id {int(ids[j])} at flat position {j} "
                              f"is outside its level-{int(level[j]) + 1} block")
        return (ids - lo).reshape(-1, levels)

    def audio_ids(self, codes: np.ndarray) -> np.ndarray:
        return self._flatten(codes, self.audio_base, self.audio_codebook,
                             self.audio_levels, "audio")

    def motion_ids(self, codes: np.ndarray) -> np.ndarray:
        return self._flatten(codes, self.motion_base, self.motion_codebook,
                             self.motion_levels, "motion")

    def audio_codes(self, ids: np.ndarray) -> np.ndarray:
        return self._unflatten(ids, self.audio_base, self.audio_codebook,
                               self.audio_levels, "audio")

    def motion_codes(self, ids: np.ndarray) -> np.ndarray:
        return self._unflatten(ids, self.motion_base, self.motion_codebook,
                               self.motion_levels, "motion")

    def motion_id_range(self) -> tuple[int, int]:
        return self.motion_base, self.control_base

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VocabLayout":
        return cls(**d)


# -- examples ---------------------------------------------------------------------

@dataclass
class TrainingExample:
    ids: np.ndarray        # (N,) int64
    loss_mask: np.ndarray  # (N,) bool; mask[i] counts the prediction of ids[i+1]
    task: str

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.ids.shape != self.loss_mask.shape or self.ids.ndim != 1:
            raise ValueError("ids and loss_mask must be equal-length vectors")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.loss_mask.size and self.loss_mask[-1]:
            raise ValueError("final position has no successor to predict")

    def __len__(self) -> int:
        return self.ids.size


def _text_bytes(text) -> bytes:
    return text.encode("utf-8") if isinstance(text, str) else bytes(text)


def serialize_example(layout: VocabLayout, task: str, motion=None, audio=None,
                      text=None, context: int | None = None) -> TrainingExample:
    """[BOS][SEP_TEXT text]?[SEP_AUDIO audio]?[SEP_MOTION motion]?[EOS] with a
    predictor-aligned loss mask: SFT masks in the positions that predict the
    ids after SEP_MOTION (through EOS); completion masks in everything after
    the position that predicts the leading separator."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if task == "motion_completion":
        if motion is None:
            raise GesticulateError("motion_completion needs motion tokens")
        if audio is not None or text is not None:
            raise GesticulateError("motion_completion takes motion only")
    elif task == "audio_completion":
        if audio is None:
            raise GesticulateError("audio_completion needs audio tokens")
        if motion is not None or text is not None:
            raise GesticulateError("audio_completion takes audio only")
    elif task == "audio_to_motion":
        if audio is None or motion is None:
            raise GesticulateError("audio_to_motion needs audio and motion")
        if text is not None:
            raise GesticulateError("audio_to_motion takes no text; use "
                                   "text_audio_to_motion")
    else:  # text_audio_to_motion
        if audio is None or motion is None or text is None:
            raise GesticulateError("text_audio_to_motion needs text, audio, "
                                   "and motion")
        if len(_text_bytes(text)) == 0:
            raise GesticulateError("empty prompt: use audio_to_motion instead")

    ids = [layout.bos]
    if text is not None:
        ids.append(layout.sep_text)
        ids.extend(int(b) for b in _text_bytes(text))
    if audio is not None:
        codes = audio.codes if isinstance(audio, AudioTokens) else audio
        ids.append(layout.sep_audio)
        ids.extend(layout.audio_ids(codes).tolist())
    sep_motion_at = None
    if motion is not None:
        codes = motion.codes if isinstance(motion, MotionTokens) else motion
        sep_motion_at = len(ids)
        ids.append(layout.sep_motion)
        ids.extend(layout.motion_ids(codes).tolist())
    ids.append(layout.eos)

    if context is not None and len(ids) > context:
        raise GesticulateError(f"example of {len(ids)} tokens exceeds the "
                               f"{context}-token context")

    mask = np.zeros(len(ids), dtype=bool)
    start = 1 if task in COMPLETION_TASKS else sep_motion_at
    mask[start:len(ids) - 1] = True
    return TrainingExample(ids=np.asarray(ids, dtype=np.int64),
                           loss_mask=mask, task=task)


@dataclass
class ParsedExample:
    task: str
    text: bytes | None
    audio_codes: np.ndarray | None
    motion_codes: np.ndarray | None


def deserialize_example(layout: VocabLayout, ids: np.ndarray) -> ParsedExample:
    """Strict inverse of serialize_example (partial timesteps are errors)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 2:
        raise FormatError("example must be a vector starting BOS, ending EOS")
    if ids[0] != layout.bos or ids[-1] != layout.eos:
        raise FormatError("example must start with BOS and end with EOS")
    body = ids[1:-1]
    if np.any(body == layout.bos) or np.any(body == layout.eos):
        raise FormatError("BOS/EOS may appear only at the ends")
    if np.any(ids == layout.pad):
        raise FormatError("PAD has no place in a serialized example")

    seps = {layout.sep_text: "text", layout.sep_audio: "audio",
            layout.sep_motion: "motion"}
    positions = [i for i, t in enumerate(body) if int(t) in seps]
    if not positions or positions[0] != 0:
        raise FormatError("expected a separator right after BOS")
    names = [seps[int(body[i])] for i in positions]
    if len(set(names)) != len(names):
        raise FormatError("duplicate modality segment")
    if names != [n for n in ("text", "audio", "motion") if n in names]:
        raise FormatError("segments out of order (text, audio, motion)")

    bounds = positions + [body.size]
    segments: dict[str, np.ndarray] = {}
    for j, name in enumerate(names):
        segments[name] = body[bounds[j] + 1: bounds[j + 1]]

    text = audio_codes = motion_codes = None
    if "text" in segments:
        seg = segments["text"]
        if seg.size == 0:
            raise FormatError("empty text segment")
        if seg.min() < 0 or seg.max() >= layout.n_text:
            raise FormatError("text segment contains non-byte ids")
        text = bytes(seg.tolist())
    if "audio" in segments:
        audio_codes = layout.audio_codes(segments["audio"])
    if "motion" in segments:
        motion_codes = layout.motion_codes(segments["motion"])

    present = frozenset(segments)
    task_of = {frozenset(("motion",)): "motion_completion",
               frozenset(("audio",)): "audio_completion",
               frozenset(("audio", "motion")): "audio_to_motion",
               frozenset(("text", "audio", "motion")): "text_audio_to_motion"}
    if present not in task_of:
        raise FormatError(f"no task has exactly these segments: {sorted(present)}")
    return ParsedExample(task=task_of[present], text=text,
                         audio_codes=audio_codes, motion_codes=motion_codes)


def nll_loss(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean over masked positions of -log softmax(logits)[target]."""
    with ad.no_grad():
        return float(ad.masked_nll(Tensor(np.asarray(logits, dtype=np.float64)),
                                   targets, mask).data)


# -- model ------------------------------------------------------------------------

@dataclass
class LmConfig:
    layers: int = 4
    heads: int = 4
    width: int = 128
    context: int = 1024
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    epochs: int = 3
    batch_size: int = 8
    top_k: int = 8
    temperature: float = 0.9
    max_len_factor: float = 1.2

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.width < 1:
            raise ValueError("layers, heads, width must be >= 1")
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if self.context < 8:
            raise ValueError("context must be >= 8")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.top_k < 1 or self.temperature <= 0:
            raise ValueError("top_k must be >= 1 and temperature positive")
        if self.max_len_factor < 1.0:
            raise ValueError("max_len_factor must be >= 1")


class LmNet(nn.Module):
    """Decoder-only transformer: token + position embeddings, causal blocks,
    final layer norm, linear head."""

    def __init__(self, vocab_size: int, cfg: LmConfig, rng: np.random.Generator):
        self.tok = nn.Embedding(vocab_size, cfg.width, rng)
        self.pos = nn.Embedding(cfg.context, cfg.width, rng)
        self.blocks = [nn.TransformerBlock(cfg.width, cfg.heads, rng, causal=True)
                       for _ in range(cfg.layers)]
        self.ln_f = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, vocab_size, rng)

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        B, T = ids.shape
        x = self.tok(ids) + self.pos(np.arange(T))
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


@dataclass
class LmModel:
    net: LmNet
    layout: VocabLayout
    cfg: LmConfig
    config_hash: str = ""

    def logits(self, ids: np.ndarray) -> np.ndarray:
        """(B, T) ids -> (B, T, vocab) logits, no gradient tracking."""
        with ad.no_grad():
            return self.net(ids).data


def build_lm(layout: VocabLayout, cfg: LmConfig, seed: int,
             config_hash: str = "") -> LmModel:
    rng = np.random.default_rng(seed)
    return LmModel(net=LmNet(layout.vocab_size, cfg, rng), layout=layout,
                   cfg=cfg, config_hash=config_hash)


# -- training -----------------------------------------------------------------------

def _pad_batch(examples: list[TrainingExample], pad_id: int):
    width = max(len(e) for e in examples)
    ids = np.full((len(examples), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=bool)
    for i, e in enumerate(examples):
        ids[i, :len(e)] = e.ids
        mask[i, :len(e)] = e.loss_mask
    return ids, mask


def train_lm(examples: list[TrainingExample], stage: str, layout: VocabLayout,
             cfg: LmConfig, seed: int, init: LmModel | None = None,
             from_scratch: bool = False,
             config_hash: str = "") -> tuple[LmModel, list[dict]]:
    """Teacher-forced training; `stage` is 'pretrain' or 'sft'. SFT requires a
    pretrained `init` unless from_scratch=True explicitly waives it."""
    if stage not in ("pretrain", "sft"):
        raise ValueError(f"stage must be 'pretrain' or 'sft', got {stage!r}")
    if not examples:
        raise ValueError("no training examples")
    if stage == "sft" and init is None and not from_scratch:
        raise GesticulateError("sft stage needs a pretrained init model "
                               "(or from_scratch=True to skip pretraining)")
    for i, e in enumerate(examples):
        if len(e) > cfg.context:
            raise GesticulateError(f"example {i} has {len(e)} tokens, over the "
                                   f"{cfg.context}-token context")

    rng = np.random.default_rng(seed)
    model = build_lm(layout, cfg, seed, config_hash=config_hash)
    if init is not None:
        if init.layout != layout:
            raise GesticulateError("init model has a different vocab layout")
        model.net.load_state_dict(init.net.state_dict())

    opt = nn.AdamW(model.net.parameters(), lr=cfg.learning_rate,
                   weight_decay=cfg.weight_decay)
    n_batches = math.ceil(len(examples) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    warmup = int(math.ceil(cfg.warmup_frac * total_steps))

    log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        losses = []
        for b in range(n_batches):
            batch = [examples[i] for i in order[b * cfg.batch_size:
                                                (b + 1) * cfg.batch_size]]
            ids, mask = _pad_batch(batch, layout.pad)
            targets = np.roll(ids, -1, axis=1)
            logits = model.net(ids)
            B, T, V = logits.shape
            loss = ad.masked_nll(ad.reshape(logits, (B * T, V)),
                                 targets.reshape(-1), mask.reshape(-1))
            if not np.isfinite(loss.data):
                raise GesticulateError(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(nn.cosine_warmup_scale(step, total_steps, warmup))
            losses.append(float(loss.data))
            step += 1
        log.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return model, log


def mean_nll(model: LmModel, examples: list[TrainingExample]) -> float:
    """Evaluation loss: masked NLL averaged over all examples' positions."""
    if not examples:
        raise ValueError("no examples")
    ids, mask = _pad_batch(examples, model.layout.pad)
    targets = np.roll(ids, -1, axis=1)
    logits = model.logits(ids)
    B, T, V = logits.shape
    return nll_loss(logits.reshape(B * T, V), targets.reshape(-1),
                    mask.reshape(-1))


# -- generation -----------------------------------------------------------------------

def _ln_np(x: np.ndarray, ln: nn.LayerNorm) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return (centered * (var + ln.eps) ** -0.5) * ln.gain.data + ln.shift.data


def _gelu_np(x: np.ndarray) -> np.ndarray:
    inner = (x + (x * x * x) * 0.044715) * math.sqrt(2.0 / math.pi)
    return x * (np.tanh(inner) + 1.0) * 0.5


class GenerationSession:
    """Single-sequence incremental decoding with per-layer key/value caches."""

    def __init__(self, net: LmNet):
        self.net = net
        self.keys: list[list[np.ndarray]] = [[] for _ in net.blocks]
        self.vals: list[list[np.ndarray]] = [[] for _ in net.blocks]
        self.position = 0

    def feed(self, token_id: int) -> np.ndarray:
        """Advance one token; return the logits for the next position."""
        net = self.net
        if self.position >= net.pos.weight.data.shape[0]:
            raise GesticulateError("sequence exceeds the model context")
        x = net.tok.weight.data[token_id] + net.pos.weight.data[self.position]
        for li, block in enumerate(net.blocks):
            attn = block.attn
            h = _ln_np(x, block.ln1)
            q = h @ attn.wq.weight.data + attn.wq.bias.data
            self.keys[li].append(h @ attn.wk.weight.data + attn.wk.bias.data)
            self.vals[li].append(h @ attn.wv.weight.data + attn.wv.bias.data)
            K = np.stack(self.keys[li]).reshape(-1, attn.heads, attn.head_dim)
            V = np.stack(self.vals[li]).reshape(-1, attn.heads, attn.head_dim)
            qh = q.reshape(attn.heads, attn.head_dim)
            scores = np.einsum("hd,thd->ht", qh, K) / math.sqrt(attn.head_dim)
            scores -= scores.max(axis=1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=1, keepdims=True)
            ctx = np.einsum("ht,thd->hd", w, V).reshape(-1)
            x = x + ctx @ attn.wo.weight.data + attn.wo.bias.data
            h2 = _ln_np(x, block.ln2)
            mid = _gelu_np(h2 @ block.fc1.weight.data + block.fc1.bias.data)
            x = x + mid @ block.fc2.weight.data + block.fc2.bias.data
        self.position += 1
        y = _ln_np(x, net.ln_f)
        return y @ net.head.weight.data + net.head.bias.data


def expected_motion_token_count(layout: VocabLayout, audio: AudioTokens,
                                fps_latent: float) -> int:
    seconds = audio.codes.shape[0] / audio.frame_rate
    steps = max(1, int(math.ceil(seconds * fps_latent)))
    return steps * layout.motion_levels


def generate(model: LmModel, audio: AudioTokens, text=None,
             sampling: str = "greedy", seed: int = 0,
             max_len: int | None = None, min_steps: int = 0,
             *, fps_latent: float) -> MotionTokens:
    """Sample motion ids after [.. SEP_AUDIO audio][SEP_MOTION] until EOS or
    max_len; every sampled id is forced into the motion range or EOS; output
    is de-flattened to (S, L) with any trailing partial timestep dropped.
    EOS is not offered until min_steps whole timesteps have been sampled."""
    if sampling not in ("greedy", "top_k"):
        raise ValueError(f"sampling must be 'greedy' or 'top_k', got {sampling!r}")
    layout = model.layout
    prompt = [layout.bos]
    if text is not None and len(_text_bytes(text)) > 0:
        prompt.append(layout.sep_text)
        prompt.extend(int(b) for b in _text_bytes(text))
    prompt.append(layout.sep_audio)
    prompt.extend(layout.audio_ids(audio.codes).tolist())
    prompt.append(layout.sep_motion)
    if len(prompt) + 1 > model.cfg.context:
        raise GesticulateError(f"prompt of {len(prompt)} tokens leaves no room "
                               f"in the {model.cfg.context}-token context")

    if max_len is None:
        max_len = int(math.ceil(expected_motion_token_count(layout, audio, fps_latent)
                                * model.cfg.max_len_factor))
    budget = min(max_len, model.cfg.context - len(prompt))

    # each output slot may hold only its own level's code block (or EOS),
    # so any sampled sequence de-flattens cleanly
    lo, _ = layout.motion_id_range()
    k, levels = layout.motion_codebook, layout.motion_levels
    valid_by_level = [
        np.append(np.arange(lo + l * k, lo + (l + 1) * k), layout.eos)
        for l in range(levels)
    ]
    rng = np.random.default_rng(seed)

    session = GenerationSession(model.net)
    logits = None
    for tok in prompt:
        logits = session.feed(tok)

    out: list[int] = []
    min_ids = max(min_steps, 0) * levels
    for _ in range(budget):
        valid = valid_by_level[len(out) % levels]
        if len(out) < min_ids:
            valid = valid[:-1]   # EOS sits last in each level's valid set
        candidate_logits = logits[valid]
        if sampling == "greedy":
            pick = valid[int(np.argmax(candidate_logits))]
        else:
            k = min(model.cfg.top_k, valid.size)
            top = np.argsort(-candidate_logits, kind="stable")[:k]
            scaled = candidate_logits[top] / model.cfg.temperature
            scaled -= scaled.max()
            probs = np.exp(scaled)
            probs /= probs.sum()
            pick = valid[top[rng.choice(k, p=probs)]]
        pick = int(pick)
        if pick == layout.eos:
            break
        out.append(pick)
        logits = session.feed(pick)

    whole = (len(out) // levels) * levels
    if whole == 0:
        raise GesticulateError("model produced no complete motion timestep")
    codes = layout.motion_codes(np.asarray(out[:whole], dtype=np.int64))
    return MotionTokens(codes=codes, fps_latent=fps_latent,
                        root_start=np.zeros(3))


# -- persistence ---------------------------------------------------------------------

def save_lm(model: LmModel, path: str):
    meta = {"config": asdict(model.cfg), "layout": model.layout.to_dict(),
            "config_hash": model.config_hash}
    arrays = {f"net/{k}": v for k, v in model.net.state_dict().items()}
    save_archive(path, FORMAT_TAG, meta, arrays)


def load_lm(path: str) -> LmModel:
    meta, arrays = load_archive(path, FORMAT_TAG)
    cfg = LmConfig(**meta["config"])
    layout = VocabLayout.from_dict(meta["layout"])
    model = build_lm(layout, cfg, seed=0, config_hash=meta.get("config_hash", ""))
    model.net.load_state_dict(
        {k[len("net/"):]: v for k, v in arrays.items() if k.startswith("net/")})
    return model
