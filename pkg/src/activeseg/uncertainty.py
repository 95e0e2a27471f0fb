"""MC-dropout sampling, predictive entropy and slice-candidate extraction."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError
from .learner import (
    _CHUNK,
    FeatureCache,
    FeatureConfig,
    MlpParams,
    _check_features,
    _hidden,
    _softmax,
    feature_matrix,
)
from .volume import LabelVolume, ScalarVolume, dilate

LN2 = math.log(2.0)
UNCERTAINTY_DILATION = (5, 5, 5)  # 11x11x11 box
PEAK_MIN_DISTANCE = 5


@dataclass(frozen=True, eq=False)
class McSampleSet:
    samples: list[ScalarVolume]
    seed: int

    def __post_init__(self):
        if not self.samples:
            raise InvalidArgumentError("sample set must hold at least one sample")
        first = self.samples[0]
        for s in self.samples[1:]:
            if s.dims != first.dims or s.spacing != first.spacing:
                raise InvalidArgumentError("all samples must share dims and spacing")

    @property
    def n(self) -> int:
        return len(self.samples)


def sample_rng(seed: int, k: int) -> np.random.Generator:
    """Dropout stream for MC sample ``k``; independent of sampling order."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(k),)))


def mc_sample(params: MlpParams, v: ScalarVolume, cfg: FeatureConfig, n: int = 20, seed: int = 0,
              cache: FeatureCache | None = None) -> McSampleSet:
    """``n`` stochastic forward passes with dropout active.

    The first hidden layer's pre-dropout activations do not depend on the
    masks, so they are computed once and reused for every sample.
    """
    if n < 1:
        raise InvalidArgumentError(f"sample count must be >= 1, got {n}")
    feats = cache.get(v) if cache is not None else feature_matrix(v, cfg)
    _check_features(params, feats)
    n_vox = feats.shape[0]
    keep = 1.0 / (1.0 - params.dropout)
    hidden = params.hidden_sizes

    chunks = [slice(s, s + _CHUNK) for s in range(0, n_vox, _CHUNK)]
    first = [np.tanh(feats[c] @ params.weights[0] + params.biases[0]) for c in chunks]

    samples = []
    for k in range(n):
        rng = sample_rng(seed, k)
        out = np.empty(n_vox)
        for c, a0 in zip(chunks, first):
            rows = a0.shape[0]
            masks = [(rng.random((rows, h), dtype=np.float32) >= params.dropout) * keep for h in hidden]
            _, inputs = _hidden(params, a0 * masks[0], masks, start=1)
            out[c] = _softmax(inputs[-1] @ params.weights[-1] + params.biases[-1])[:, 1]
        samples.append(ScalarVolume(out.reshape(v.dims, order="F"), v.spacing))
    return McSampleSet(samples, int(seed))


def entropy_from_samples(probs: np.ndarray) -> np.ndarray:
    """Predictive entropy along axis 0 of a stack of foreground probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    m1 = probs.mean(axis=0)
    m0 = (1.0 - probs).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(m1 > 0, m1 * np.log(m1), 0.0)
        t0 = np.where(m0 > 0, m0 * np.log(m0), 0.0)
    return -(t0 + t1)


def predictive_entropy(s: McSampleSet) -> ScalarVolume:
    """Voxel-wise entropy (nats) of the sample-averaged class distribution."""
    stack = np.stack([smp.data for smp in s.samples])
    return ScalarVolume(entropy_from_samples(stack), s.samples[0].spacing)


class VolumeUncertainty(NamedTuple):
    value: float
    mask_empty: bool  # True when the dilated mask was empty and all voxels were averaged


def volume_uncertainty(e: ScalarVolume, predicted_mask: LabelVolume,
                       kernel_radius=UNCERTAINTY_DILATION) -> VolumeUncertainty:
    """Mean entropy inside the dilated predicted foreground mask."""
    if e.dims != predicted_mask.dims:
        raise InvalidArgumentError(f"dims differ: {e.dims} vs {predicted_mask.dims}")
    region = dilate(predicted_mask, kernel_radius).data.astype(bool)
    if not region.any():
        warnings.warn("dilated mask is empty; averaging entropy over the whole volume", stacklevel=2)
        return VolumeUncertainty(float(e.data.mean()), True)
    return VolumeUncertainty(float(e.data[region].mean()), False)


@dataclass
class SliceUncertaintyProfile:
    values: np.ndarray
    peaks: list[int] = field(default_factory=list)


def slice_uncertainty_profile(e: ScalarVolume) -> SliceUncertaintyProfile:
    """Mean entropy over each full x-y slice, indexed by z."""
    return SliceUncertaintyProfile(e.data.mean(axis=(0, 1)))


def local_maxima(values) -> list[int]:
    """Indices of local maxima.

    A run of equal values counts once, at its leftmost index, when it is
    strictly higher than each existing neighbor of the run.
    """
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    out = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and v[j + 1] == v[i]:
            j += 1
        left_ok = i == 0 or v[i - 1] < v[i]
        right_ok = j == n - 1 or v[j + 1] < v[i]
        if left_ok and right_ok:
            out.append(i)
        i = j + 1
    return out


def find_peaks(values, min_distance: int = PEAK_MIN_DISTANCE) -> list[int]:
    """Local maxima thinned so that accepted peaks are ``min_distance`` apart.

    Candidates are visited by decreasing value (ties: lower index first); a
    candidate closer than ``min_distance`` to an accepted peak is dropped.
    """
    if min_distance < 1:
        raise InvalidArgumentError("min_distance must be >= 1")
    v = np.asarray(values, dtype=np.float64)
    cands = sorted(local_maxima(v), key=lambda i: (-v[i], i))
    taken = np.zeros(v.size, dtype=bool)  # slots blocked by accepted peaks
    accepted = []
    for i in cands:
        if taken[i]:
            continue
        accepted.append(i)
        taken[max(0, i - min_distance + 1): i + min_distance] = True
    return sorted(accepted)


def profile_with_peaks(e: ScalarVolume, min_distance: int = PEAK_MIN_DISTANCE) -> SliceUncertaintyProfile:
    prof = slice_uncertainty_profile(e)
    prof.peaks = find_peaks(prof.values, min_distance)
    return prof
