"""Trigger generators: voice-conversion adapter, spectrogram BadNets, surrogate shift.

A :class:`TriggerSpec` is a declarative, hashable description of one
trigger; :func:`apply_trigger` turns a clean :class:`AudioSample` into its
poisoned counterpart.
"""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct, idct

from .data import POISONED, AudioSample, LabeledDataset, read_wav, write_wav
from .dsp import (
    CANONICAL_SR,
    FRAME_LENGTH,
    HOP_LENGTH,
    Spectrogram,
    clip_audio,
    fit_length,
    istft,
    resample,
    stft,
)
from .errors import (
    AdapterTimeoutError,
    ConfigurationError,
    ParameterError,
    SizeError,
    TriggerError,
)
from .kernels import phase_vocoder_shift

KINDS = ("voice_conversion", "badnets_spectrogram", "surrogate_identity_shift", "none")
BADNETS_BINS = 10
# Low-band removal stops 3.5 bins short of bin 10; at 2.5 bins the Hann side lobes of
# voiced content near the cutoff still moved bins 10-12 by up to 2.4e-3 relative.
BADNETS_CUTOFF_BINS = 6.5

# Surrogate parameter ranges and the band layout used by the re-weighting.
RATIO_RANGE = (0.5, 2.0)
WEIGHT_RANGE = (0.25, 4.0)
BAND_CENTRES_HZ = (250.0, 1000.0, 2500.0, 5500.0)

VC_COMMAND_ENV = "VCBACKDOOR_VC_COMMAND"


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class TriggerSpec:
    kind: str
    target_speech_path: str | None = None
    target_speaker_id: str | None = None
    pattern_amplitude: float = 0.0
    shift_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "voice_conversion" and not self.target_speech_path:
            raise ConfigurationError("voice_conversion trigger needs target_speech_path")
        if self.pattern_amplitude < 0:
            raise ParameterError("pattern_amplitude must be non-negative")
        if self.kind == "surrogate_identity_shift":
            validate_shift_params(self.shift_params)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target_speech_path": None if self.target_speech_path is None else str(self.target_speech_path),
            "target_speaker_id": self.target_speaker_id,
            "pattern_amplitude": float(self.pattern_amplitude),
            "shift_params": _jsonable(self.shift_params),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> TriggerSpec:
        known = {"kind", "target_speech_path", "target_speaker_id", "pattern_amplitude", "shift_params"}
        spec = cls(**{k: v for k, v in doc.items() if k in known})
        if "trigger_id" in doc and doc["trigger_id"] != spec.trigger_id:
            raise ParameterError(
                f"trigger_id {doc['trigger_id']!r} does not match the spec fields ({spec.trigger_id})"
            )
        return spec

    @property
    def trigger_id(self) -> str:
        return f"{self.kind[:3]}-" + hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()[:16]

    def __hash__(self):
        return hash(self.trigger_id)

    def __eq__(self, other):
        return isinstance(other, TriggerSpec) and self.to_dict() == other.to_dict()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


# --------------------------------------------------------------------------
# BadNets on the lowest spectrogram bins
# --------------------------------------------------------------------------

def _low_band(n: int, cutoff_hz: float, sample_rate: int) -> np.ndarray:
    return np.arange(n) * sample_rate / (2.0 * n) < cutoff_hz


def remove_low_band(waveform, cutoff_hz: float, sample_rate: int = CANONICAL_SR) -> np.ndarray:
    """Orthogonal projection removing DCT-II components below ``cutoff_hz``.

    The even extension implied by the DCT matches the reflect padding of
    :func:`stft`, so edge frames do not pick up wrap-around leakage.
    """
    coeffs = dct(np.asarray(waveform, dtype=np.float64), norm="ortho")
    coeffs[_low_band(coeffs.size, cutoff_hz, sample_rate)] = 0.0
    return idct(coeffs, norm="ortho")


def badnets_pattern(length: int, pattern_amplitude: float, frame_length: int = FRAME_LENGTH,
                    hop_length: int = HOP_LENGTH, sample_rate: int = CANONICAL_SR) -> np.ndarray:
    """Static low-band pattern whose RMS STFT magnitude over bins 0-9 is ``pattern_amplitude``."""
    cutoff = BADNETS_CUTOFF_BINS * sample_rate / frame_length
    n = np.arange(length)
    ks = np.arange(1, int(BADNETS_CUTOFF_BINS - 0.5) + 1)
    phases = np.pi * np.arange(ks.size) ** 2 / ks.size  # Schroeder phases keep the crest factor low
    raw = np.cos(2 * np.pi * ks[:, None] * n / frame_length + phases[:, None]).sum(axis=0)
    pattern = raw - remove_low_band(raw, cutoff, sample_rate)
    if pattern_amplitude == 0:
        return np.zeros(length)
    mags = stft(pattern, frame_length, hop_length, sample_rate).magnitudes[:BADNETS_BINS]
    return pattern * (pattern_amplitude / np.sqrt(np.mean(mags ** 2)))


def badnets_trigger(waveform, pattern_amplitude: float, frame_length: int = FRAME_LENGTH,
                    hop_length: int = HOP_LENGTH, sample_rate: int = CANONICAL_SR) -> np.ndarray:
    """Replace the lowest spectrogram bins with a static tone pattern.

    The input's content below 6.5 bins (203 Hz at the defaults) is projected
    out and :func:`badnets_pattern` is added in its place.  Because the
    removal is a projector and the pattern lives entirely in the removed
    band, applying the trigger twice gives the same waveform as applying it
    once.  Bins 10 and up are disturbed only by window side-lobe leakage.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.size < frame_length:
        raise SizeError(f"waveform of {x.size} samples is shorter than one frame ({frame_length})")
    if pattern_amplitude < 0:
        raise ParameterError("pattern_amplitude must be non-negative")
    cutoff = BADNETS_CUTOFF_BINS * sample_rate / frame_length
    out = remove_low_band(x, cutoff, sample_rate)
    out += badnets_pattern(x.size, pattern_amplitude, frame_length, hop_length, sample_rate)
    return clip_audio(out)


def default_badnets_amplitude(dataset: LabeledDataset, percentile: float = 95.0) -> float:
    """Half the dataset's 95th-percentile STFT bin magnitude."""
    mags = [stft(s.waveform).magnitudes.ravel() for s in dataset.samples if s.waveform.size >= FRAME_LENGTH]
    if not mags:
        raise ParameterError("no sample is long enough to estimate a pattern amplitude")
    return 0.5 * float(np.percentile(np.concatenate(mags), percentile))


# --------------------------------------------------------------------------
# surrogate identity shift
# --------------------------------------------------------------------------

def validate_shift_params(params: dict) -> tuple[float, np.ndarray]:
    ratio = float(params.get("ratio", 1.0))
    weights = np.asarray(params.get("band_weights", [1.0] * len(BAND_CENTRES_HZ)), dtype=np.float64)
    if not RATIO_RANGE[0] <= ratio <= RATIO_RANGE[1]:
        raise ParameterError(f"shift ratio {ratio} outside {RATIO_RANGE}")
    if weights.shape != (len(BAND_CENTRES_HZ),):
        raise ParameterError(f"band_weights needs {len(BAND_CENTRES_HZ)} values, got {weights.size}")
    if np.any(weights < WEIGHT_RANGE[0]) or np.any(weights > WEIGHT_RANGE[1]):
        raise ParameterError(f"band_weights must lie in {WEIGHT_RANGE}")
    unknown = set(params) - {"ratio", "band_weights"}
    if unknown:
        raise ParameterError(f"unknown shift parameters {sorted(unknown)}")
    return ratio, weights


def band_gain_curve(weights, frame_length: int = FRAME_LENGTH, sample_rate: int = CANONICAL_SR) -> np.ndarray:
    """Per-bin gain, linear in Hz between band centres and flat beyond them."""
    freqs = np.fft.rfftfreq(frame_length, 1.0 / sample_rate)
    return np.interp(freqs, BAND_CENTRES_HZ, np.asarray(weights, dtype=np.float64))


def surrogate_identity_shift(waveform, shift_params: dict, frame_length: int = FRAME_LENGTH,
                             hop_length: int = HOP_LENGTH, sample_rate: int = CANONICAL_SR) -> np.ndarray:
    """Deterministic stand-in for voice conversion (not the converter itself).

    Scales every frequency by ``ratio`` with a phase vocoder, then applies a
    smooth gain over four formant bands.  Identity parameters (``ratio=1``,
    all weights 1) reproduce the STFT round trip of the input.
    """
    ratio, weights = validate_shift_params(shift_params)
    x = np.asarray(waveform, dtype=np.float64)
    if x.size < frame_length:
        raise SizeError(f"waveform of {x.size} samples is shorter than one frame ({frame_length})")
    spec = stft(x, frame_length, hop_length, sample_rate)
    mags, phases = phase_vocoder_shift(spec.magnitudes, spec.phases, ratio, hop_length, frame_length)
    mags *= band_gain_curve(weights, frame_length, sample_rate)[:, None]
    out = istft(Spectrogram(mags, phases, frame_length, hop_length, sample_rate, x.size))
    return clip_audio(out)


# --------------------------------------------------------------------------
# voice-conversion adapter
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class VCAdapterConfig:
    """How to reach an external file-in/file-out voice converter.

    ``invocation`` is either a shell-style command template with
    ``{source}``, ``{target}`` and ``{output}`` placeholders, or an
    ``http(s)://`` URL accepting a multipart POST with ``source`` and
    ``target`` WAV parts and answering with WAV bytes.
    """

    invocation: str
    workdir: str = "."
    timeout: float = 120.0
    expected_sample_rate: int = CANONICAL_SR
    cache_dir: str | None = None
    version: str = "1"
    max_parallel: int = 1

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigurationError("adapter timeout must be positive")
        if self.max_parallel < 1:
            raise ConfigurationError("max_parallel must be >= 1")

    @classmethod
    def from_env(cls, default: str | None = None, **kwargs) -> VCAdapterConfig:
        invocation = os.environ.get(VC_COMMAND_ENV, default)
        if not invocation:
            raise ConfigurationError(f"no voice-conversion command configured (set {VC_COMMAND_ENV})")
        return cls(invocation=invocation, **kwargs)


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class VCAdapter:
    """Runs the configured converter, caching results by content hash."""

    def __init__(self, config: VCAdapterConfig):
        self.config = config
        self.invocations = 0
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(config.max_parallel)
        cache = config.cache_dir or os.path.join(config.workdir, ".vc_cache")
        self.cache_dir = Path(cache)

    def cache_key(self, source_path, target_path) -> str:
        parts = [_file_digest(source_path), _file_digest(target_path), self.config.version]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()

    def convert(self, source_path, target_path) -> np.ndarray:
        source_path, target_path = Path(source_path), Path(target_path)
        for p, what in ((source_path, "source"), (target_path, "target speech")):
            if not p.exists():
                raise ConfigurationError(f"{what} file not found: {p}")
        src, src_sr = read_wav(source_path)
        n_out = resample(src, src_sr, CANONICAL_SR).size

        key = self.cache_key(source_path, target_path)
        cached = self.cache_dir / f"{key}.wav"
        if cached.exists():
            wav, _ = read_wav(cached)
            return wav

        with self._slots:
            with self._lock:
                self.invocations += 1
            Path(self.config.workdir).mkdir(parents=True, exist_ok=True)
            with tempfile.TemporaryDirectory(dir=self.config.workdir) as tmp:
                out_path = Path(tmp) / "converted.wav"
                if self.config.invocation.startswith(("http://", "https://")):
                    self._call_service(source_path, target_path, out_path)
                else:
                    self._call_command(source_path, target_path, out_path)
                try:
                    wav, sr = read_wav(out_path)
                except Exception as exc:
                    raise TriggerError("voice converter produced unreadable audio", str(exc)) from exc

        wav = clip_audio(fit_length(resample(wav, sr, CANONICAL_SR), n_out))
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        tmp_cached = cached.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp")
        write_wav(tmp_cached, wav, CANONICAL_SR)
        os.replace(tmp_cached, cached)
        return read_wav(cached)[0]

    def _call_command(self, source_path, target_path, out_path):
        cmd = self.config.invocation.format(
            source=shlex.quote(str(source_path)),
            target=shlex.quote(str(target_path)),
            output=shlex.quote(str(out_path)),
        )
        try:
            proc = subprocess.run(
                shlex.split(cmd), cwd=self.config.workdir, capture_output=True,
                text=True, timeout=self.config.timeout,
            )
        except subprocess.TimeoutExpired as exc:
            raise AdapterTimeoutError(
                f"voice converter timed out after {self.config.timeout}s", str(exc.stderr or "")
            ) from exc
        except OSError as exc:
            raise TriggerError("could not launch voice converter", str(exc)) from exc
        if proc.returncode != 0:
            raise TriggerError(
                f"voice converter exited with status {proc.returncode}",
                (proc.stderr or "") + (proc.stdout or ""),
            )
        if not out_path.exists():
            raise TriggerError("voice converter exited cleanly but wrote no output", proc.stderr or "")

    def _call_service(self, source_path, target_path, out_path):
        import requests

        try:
            with open(source_path, "rb") as s, open(target_path, "rb") as t:
                resp = requests.post(
                    self.config.invocation,
                    files={"source": ("source.wav", s, "audio/wav"), "target": ("target.wav", t, "audio/wav")},
                    timeout=self.config.timeout,
                )
        except requests.Timeout as exc:
            raise AdapterTimeoutError(f"voice converter service timed out after {self.config.timeout}s") from exc
        except requests.RequestException as exc:
            raise TriggerError("voice converter service unreachable", str(exc)) from exc
        if resp.status_code != 200:
            raise TriggerError(f"voice converter service answered HTTP {resp.status_code}", resp.text[:2000])
        out_path.write_bytes(resp.content)


_adapters: dict[VCAdapterConfig, VCAdapter] = {}
_adapters_lock = threading.Lock()


def get_adapter(config: VCAdapterConfig) -> VCAdapter:
    with _adapters_lock:
        if config not in _adapters:
            _adapters[config] = VCAdapter(config)
        return _adapters[config]


def vc_convert(source_path, target_speech_path, config: VCAdapterConfig) -> np.ndarray:
    """Convert ``source_path`` towards the voice in ``target_speech_path``.

    Output is at the canonical rate, trimmed or zero-padded to the source's
    duration, and cached by (source hash, target hash, adapter version).
    """
    return get_adapter(config).convert(source_path, target_speech_path)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def apply_trigger(sample: AudioSample, spec: TriggerSpec, adapter: VCAdapterConfig | None = None) -> AudioSample:
    """Return the poisoned version of ``sample`` under ``spec`` (label unchanged)."""
    if spec.kind == "none":
        return sample.with_waveform(sample.waveform.copy())

    if spec.kind == "badnets_spectrogram":
        wav = badnets_trigger(sample.waveform, spec.pattern_amplitude)
    elif spec.kind == "surrogate_identity_shift":
        wav = surrogate_identity_shift(sample.waveform, spec.shift_params, sample_rate=sample.sample_rate)
    elif spec.kind == "voice_conversion":
        if adapter is None:
            raise ConfigurationError("voice_conversion trigger applied without an adapter configuration")
        if not Path(spec.target_speech_path).exists():
            raise ConfigurationError(f"target speech not found: {spec.target_speech_path}")
        workdir = Path(adapter.workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        src_dir = workdir / ".vc_sources"
        src_path = src_dir / f"{sample.digest()}.wav"
        if not src_path.exists():
            write_wav(src_path, sample.waveform, sample.sample_rate)
        wav = vc_convert(src_path, spec.target_speech_path, adapter)
    else:  # pragma: no cover - guarded by TriggerSpec
        raise ParameterError(spec.kind)

    wav = clip_audio(fit_length(wav, sample.waveform.size))
    meta = dict(sample.metadata)
    meta.update({"source_id": sample.id, "source_digest": sample.digest()})
    return AudioSample(
        id=sample.id,
        waveform=wav,
        sample_rate=sample.sample_rate,
        label=sample.label,
        speaker_id=sample.speaker_id,
        provenance=POISONED,
        trigger_id=spec.trigger_id,
        metadata=meta,
    )
