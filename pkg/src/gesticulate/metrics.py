"""Gesture evaluation: distribution distance, beat alignment, diversity.

The distribution distance embeds fixed-length feature windows with a small
autoencoder trained for reconstruction, fits a Gaussian to each window set
in that latent space, and reports the Frechet distance between the fits
(lower is better).  Beat alignment scores how closely motion beats — dips
in joint angular speed — land on audio beats.  Diversity is the mean
pairwise Euclidean distance between generated samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .archive import load_archive, save_archive
from .audio import MIN_BEAT_GAP_S, BeatList
from .autodiff import Tensor, no_grad
from .exceptions import GesticulateError
from .motion_io import MotionClip
from .nn import AdamW, Linear, Module, gelu
from .rotations import quat_geodesic

FORMAT_TAG = "fgdae-v1"
STD_FLOOR = 1e-6
PSD_TOLERANCE = 1e-8
MIN_AE_WINDOWS = 100
MIN_MOTION_SECONDS = 0.5


@dataclass(frozen=True)
class MetricsConfig:
    window: int = 30              # frames per feature window (stride = window)
    sigma: float = 0.1            # beat-alignment kernel width, seconds
    ridge: float = 1e-6           # added to covariance diagonals
    latent_dim: int = 32
    ae_hidden: int = 128
    ae_steps: int = 1500
    ae_learning_rate: float = 1e-3
    ae_weight_decay: float = 0.0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.ridge < 0:
            raise ValueError(f"ridge must be non-negative, got {self.ridge}")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.ae_hidden < 1 or self.ae_steps < 1:
            raise ValueError("ae_hidden and ae_steps must be >= 1")
        if self.ae_learning_rate <= 0:
            raise ValueError("ae_learning_rate must be positive")


def feature_windows(features: np.ndarray, window: int) -> np.ndarray:
    """Cut a (frames, dims) sequence into non-overlapping (window, dims) blocks.

    The stride equals the window length; a trailing partial block is dropped.
    Returns (n_windows, window, dims); n_windows may be 0 for short input.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise GesticulateError(f"features must be 2-D (frames, dims), got shape {feats.shape}")
    if window < 1:
        raise GesticulateError(f"window must be >= 1, got {window}")
    n = feats.shape[0] // window
    return feats[: n * window].reshape(n, window, feats.shape[1]).copy()


class _WindowCoder(Module):
    """Two-layer MLP used for each half of the window autoencoder."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


@dataclass
class FeatureAutoencoder:
    """Maps flattened feature windows to a low-dimensional latent and back.

    Inference is deterministic; inputs are normalized with the training
    statistics stored on the model.  The latent must be strictly smaller
    than the flattened window.
    """

    window: int
    dim: int
    latent_dim: int
    mean: np.ndarray           # (window * dim,)
    std: np.ndarray            # (window * dim,)
    encoder: _WindowCoder
    decoder: _WindowCoder
    config_hash: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        flat_dim = self.window * self.dim
        if self.latent_dim >= flat_dim:
            raise ValueError(
                f"latent dim {self.latent_dim} must be smaller than the "
                f"{flat_dim}-dim flattened window")
        if self.mean.shape != (flat_dim,) or self.std.shape != (flat_dim,):
            raise ValueError("normalization stats must match the flattened window")

    def _normalized(self, windows: np.ndarray) -> np.ndarray:
        arr = np.asarray(windows, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1:] != (self.window, self.dim):
            raise GesticulateError(
                f"windows must have shape (n, {self.window}, {self.dim}), got {arr.shape}")
        flat = arr.reshape(arr.shape[0], -1)
        return (flat - self.mean) / self.std

    def encode(self, windows: np.ndarray) -> np.ndarray:
        """Latent vectors for a stack of windows, shape (n, latent_dim)."""
        with no_grad():
            return self.encoder(Tensor(self._normalized(windows))).data

    def reconstruct(self, windows: np.ndarray) -> np.ndarray:
        """Round-trip through the latent, back in original feature units."""
        with no_grad():
            coded = self.decoder(self.encoder(Tensor(self._normalized(windows)))).data
        flat = coded * self.std + self.mean
        return flat.reshape(-1, self.window, self.dim)

    def reconstruction_mse(self, windows: np.ndarray) -> float:
        arr = np.asarray(windows, dtype=np.float64)
        return float(np.mean((self.reconstruct(arr) - arr) ** 2))


def train_feature_autoencoder(windows: np.ndarray, cfg: MetricsConfig,
                              seed: int, config_hash: str = "",
                              ) -> tuple[FeatureAutoencoder, float]:
    """Train the window autoencoder by reconstruction; returns (model, final loss).

    The final loss is the last step's mean squared error in normalized space.
    Deterministic for a given (windows, cfg, seed).
    """
    arr = np.asarray(windows, dtype=np.float64)
    if arr.ndim != 3:
        raise GesticulateError(f"windows must be 3-D (n, window, dims), got shape {arr.shape}")
    n, window, dim = arr.shape
    if window != cfg.window:
        raise GesticulateError(f"windows are {window} frames but config says {cfg.window}")
    if n < MIN_AE_WINDOWS:
        raise GesticulateError(
            f"autoencoder training needs at least {MIN_AE_WINDOWS} windows, got {n}")
    flat_dim = window * dim
    if cfg.latent_dim >= flat_dim:
        raise GesticulateError(
            f"latent dim {cfg.latent_dim} must be smaller than the "
            f"{flat_dim}-dim flattened window")

    flat = arr.reshape(n, flat_dim)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    normalized = (flat - mean) / std

    rng = np.random.default_rng(seed)
    encoder = _WindowCoder(flat_dim, cfg.ae_hidden, cfg.latent_dim, rng)
    decoder = _WindowCoder(cfg.latent_dim, cfg.ae_hidden, flat_dim, rng)
    opt = AdamW(encoder.parameters() + decoder.parameters(),
                lr=cfg.ae_learning_rate, weight_decay=cfg.ae_weight_decay)

    batch = min(n, 128)
    loss_value = float("nan")
    for step in range(cfg.ae_steps):
        picks = rng.choice(n, size=batch, replace=False)
        x = Tensor(normalized[picks])
        diff = decoder(encoder(x)) - x
        loss = (diff * diff).mean()
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise GesticulateError(f"non-finite autoencoder loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

    model = FeatureAutoencoder(window=window, dim=dim, latent_dim=cfg.latent_dim,
                               mean=mean, std=std, encoder=encoder, decoder=decoder,
                               config_hash=config_hash)
    return model, loss_value


def save_feature_autoencoder(model: FeatureAutoencoder, path: str):
    meta = {
        "window": model.window,
        "dim": model.dim,
        "latent_dim": model.latent_dim,
        "hidden": model.encoder.fc1.weight.shape[1],
        "config_hash": model.config_hash,
    }
    arrays: dict[str, np.ndarray] = {"norm/mean": model.mean, "norm/std": model.std}
    for name, value in model.encoder.state_dict().items():
        arrays[f"enc/{name}"] = value
    for name, value in model.decoder.state_dict().items():
        arrays[f"dec/{name}"] = value
    save_archive(path, FORMAT_TAG, meta, arrays)


def load_feature_autoencoder(path: str) -> FeatureAutoencoder:
    meta, arrays = load_archive(path, FORMAT_TAG)
    window, dim = int(meta["window"]), int(meta["dim"])
    latent, hidden = int(meta["latent_dim"]), int(meta["hidden"])
    rng = np.random.default_rng(0)  # weights overwritten below
    encoder = _WindowCoder(window * dim, hidden, latent, rng)
    decoder = _WindowCoder(latent, hidden, window * dim, rng)
    encoder.load_state_dict(
        {k[len("enc/"):]: v for k, v in arrays.items() if k.startswith("enc/")})
    decoder.load_state_dict(
        {k[len("dec/"):]: v for k, v in arrays.items() if k.startswith("dec/")})
    return FeatureAutoencoder(window=window, dim=dim, latent_dim=latent,
                              mean=arrays["norm/mean"], std=arrays["norm/std"],
                              encoder=encoder, decoder=decoder,
                              config_hash=meta.get("config_hash", ""))


@dataclass
class GaussianFit:
    """Gaussian summary (mean, covariance) of a latent point cloud."""

    mean: np.ndarray         # (z,)
    covariance: np.ndarray   # (z, z), symmetric positive semi-definite

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        if self.mean.ndim != 1:
            raise ValueError(f"mean must be 1-D, got shape {self.mean.shape}")
        z = self.mean.shape[0]
        if self.covariance.shape != (z, z):
            raise ValueError(
                f"covariance must be ({z}, {z}), got {self.covariance.shape}")
        if not np.allclose(self.covariance, self.covariance.T, rtol=0.0, atol=1e-9):
            raise ValueError("covariance must be symmetric within 1e-9")
        smallest = float(np.linalg.eigvalsh(self.covariance).min())
        if smallest < -PSD_TOLERANCE:
            raise ValueError(
                f"covariance has negative eigenvalue {smallest:.3e}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(latents: np.ndarray, ridge: float = 1e-6) -> GaussianFit:
    """Mean and population covariance (plus ridge on the diagonal) of rows."""
    pts = np.asarray(latents, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise GesticulateError(
            f"need at least 2 latent rows to fit a Gaussian, got shape {pts.shape}")
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / pts.shape[0]
    cov = (cov + cov.T) / 2.0 + ridge * np.eye(pts.shape[1])
    return GaussianFit(mean=mean, covariance=cov)


def _psd_sqrt(matrix: np.ndarray, label: str) -> np.ndarray:
    """Symmetric square root via eigendecomposition; tiny negatives clamped."""
    sym = (matrix + matrix.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    if float(eigvals.min()) < -PSD_TOLERANCE:
        raise GesticulateError(
            f"{label} is not positive semi-definite "
            f"(eigenvalue {float(eigvals.min()):.3e})")
    roots = np.sqrt(np.clip(eigvals, 0.0, None))
    return (eigvecs * roots) @ eigvecs.T


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses the eigendecomposition of the symmetrized product
    A^(1/2) S_b A^(1/2), which shares its spectrum with S_a S_b and stays
    symmetric.  Eigenvalues more negative than the tolerance are an error;
    round-off negatives are clamped to zero.
    """
    if a.dim != b.dim:
        raise GesticulateError(
            f"Gaussian fits have different dimensions: {a.dim} vs {b.dim}")
    half = _psd_sqrt(a.covariance, "first covariance")
    inner = half @ b.covariance @ half
    inner = (inner + inner.T) / 2.0
    eigvals = np.linalg.eigvalsh(inner)
    if float(eigvals.min()) < -PSD_TOLERANCE:
        raise GesticulateError(
            f"covariance product is not positive semi-definite "
            f"(eigenvalue {float(eigvals.min()):.3e})")
    cross = float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())
    mean_term = float(((a.mean - b.mean) ** 2).sum())
    traces = float(np.trace(a.covariance) + np.trace(b.covariance))
    return max(mean_term + traces - 2.0 * cross, 0.0)


def fgd(real_windows: np.ndarray, gen_windows: np.ndarray,
        ae: FeatureAutoencoder, ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of the encoded window sets."""
    real_z = ae.encode(real_windows)
    gen_z = ae.encode(gen_windows)
    if real_z.shape[0] < 2 or gen_z.shape[0] < 2:
        raise GesticulateError(
            f"fgd needs at least 2 windows per set, got "
            f"{real_z.shape[0]} real and {gen_z.shape[0]} generated")
    return frechet_distance(fit_gaussian(real_z, ridge), fit_gaussian(gen_z, ridge))


def mean_angular_speed(clip: MotionClip) -> float:
    """Mean joint angular speed (rad/s) across all frames and joints."""
    if clip.n_frames < 2:
        return 0.0
    steps = quat_geodesic(clip.quats[:-1], clip.quats[1:])
    return float(steps.mean() * clip.fps)


def motion_beats(clip: MotionClip) -> BeatList:
    """Beats = dips in the smoothed mean joint angular speed, in seconds.

    The speed for the step between frames i and i+1 is the mean quaternion
    geodesic angle across joints times fps, placed at the step's center
    time.  Beats are interior local minima of the 3-point moving average
    that fall below mean - 0.5 * std, at least 100 ms apart.
    """
    duration = clip.n_frames / clip.fps
    if duration < MIN_MOTION_SECONDS:
        raise GesticulateError(
            f"motion too short for beat detection: {duration:.3f} s "
            f"< {MIN_MOTION_SECONDS} s")
    steps = quat_geodesic(clip.quats[:-1], clip.quats[1:])   # (frames-1, joints)
    speed = steps.mean(axis=1) * clip.fps
    envelope = np.convolve(speed, np.ones(3) / 3.0, mode="same")
    threshold = envelope.mean() - 0.5 * envelope.std()
    times: list[float] = []
    for i in range(1, len(envelope) - 1):
        if not (envelope[i] < envelope[i - 1] and envelope[i] <= envelope[i + 1]):
            continue
        if envelope[i] >= threshold:
            continue
        t = (i + 0.5) / clip.fps
        if times and t - times[-1] < MIN_BEAT_GAP_S:
            continue
        times.append(t)
    return BeatList(times=np.asarray(times, dtype=np.float64))


def beat_align(motion: BeatList, audio: BeatList, sigma: float = 0.1) -> float:
    """Mean Gaussian closeness of each motion beat to its nearest audio beat.

    Returns a score in [0, 1]; 1.0 means every motion beat sits exactly on
    an audio beat.  Either list empty scores 0.
    """
    if sigma <= 0:
        raise GesticulateError(f"sigma must be positive, got {sigma}")
    if len(motion) == 0 or len(audio) == 0:
        return 0.0
    gaps = motion.times[:, None] - audio.times[None, :]
    nearest_sq = np.min(gaps * gaps, axis=1)
    return float(np.mean(np.exp(-nearest_sq / (2.0 * sigma * sigma))))


def diversity(samples: list[np.ndarray]) -> float:
    """Mean pairwise Euclidean distance between flattened feature sequences."""
    if len(samples) < 2:
        raise GesticulateError(f"diversity needs at least 2 samples, got {len(samples)}")
    arrays = [np.asarray(s, dtype=np.float64) for s in samples]
    shape = arrays[0].shape
    for i, arr in enumerate(arrays[1:], start=1):
        if arr.shape != shape:
            raise GesticulateError(
                f"sample {i} has shape {arr.shape}, expected {shape}")
    flat = np.stack([a.reshape(-1) for a in arrays])
    sq = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2)
    upper = np.triu_indices(len(arrays), k=1)
    return float(np.sqrt(sq[upper]).mean())


@dataclass(frozen=True)
class EvalReport:
    """Scores for one evaluation run plus the context needed to compare runs."""

    fgd: float
    beat_align: float
    diversity: float
    sigma: float
    config_hash: str
    n_real_windows: int
    n_gen_windows: int
    n_samples: int

    def __post_init__(self):
        if not self.fgd >= 0.0:
            raise ValueError(f"fgd must be >= 0, got {self.fgd}")
        if not 0.0 <= self.beat_align <= 1.0:
            raise ValueError(f"beat_align must be in [0, 1], got {self.beat_align}")
        if not self.diversity >= 0.0:
            raise ValueError(f"diversity must be >= 0, got {self.diversity}")

    def to_json(self) -> str:
        payload = {
            "fgd": self.fgd,
            "beat_align": self.beat_align,
            "diversity": self.diversity,
            "sigma": self.sigma,
            "config_hash": self.config_hash,
            "n_real_windows": self.n_real_windows,
            "n_gen_windows": self.n_gen_windows,
            "n_samples": self.n_samples,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        """Aligned two-line table: headers with better-direction arrows, values."""
        headers = ("FGD ↓", "BeatAlign →", "Diversity →")
        values = (f"{self.fgd:.6f}", f"{self.beat_align:.6f}", f"{self.diversity:.6f}")
        widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
        head = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
        row = "  ".join(v.ljust(w) for v, w in zip(values, widths))
        return f"{head}\n{row}\n"
