"""Denoisers used as the proximal step of the solver.

Every denoiser is called as ``d(v, t)`` where ``t`` is the time point of the
current iteration. Classical denoisers turn ``t`` into a strength
``strength_scale * t``; an external process (e.g. a trained consistency
model) receives ``t`` verbatim.
"""

from __future__ import annotations

import os
import selectors
import socket
import struct
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from . import protocol
from .tensor import COMPLEX, REAL, ShapeError


class DenoiserError(RuntimeError):
    pass


class ExternalDenoiserTimeout(DenoiserError, TimeoutError):
    pass


class Denoiser:
    kind = "abstract"
    deterministic = True

    def __init__(self, strength_scale: float = 1.0, shape: Optional[Tuple[int, ...]] = None):
        if strength_scale < 0:
            raise ValueError("strength_scale must be non-negative")
        self.strength_scale = float(strength_scale)
        self.shape = tuple(shape) if shape is not None else None

    def strength(self, t: float) -> float:
        return self.strength_scale * t

    def __call__(self, v: np.ndarray, t: float) -> np.ndarray:
        if not t >= 0:
            raise ValueError(f"time point must be non-negative, got {t}")
        if self.shape is not None and v.shape != self.shape:
            raise ShapeError(f"{self.kind}: expected shape {self.shape}, got {v.shape}")
        if v.dtype not in (REAL, COMPLEX):
            raise ShapeError(f"{self.kind}: unsupported dtype {v.dtype}")
        return self._denoise(v, t)

    def _denoise(self, v, t):
        if v.dtype == COMPLEX:
            return self._denoise(v.real.copy(), t) + 1j * self._denoise(v.imag.copy(), t)
        s = self.strength(t)
        if s == 0:
            return v.copy()
        if v.ndim == 2:
            return self._filter2d(v, s)
        if v.ndim == 3:
            return np.stack([self._filter2d(v[:, :, c], s) for c in range(v.shape[2])], axis=2)
        raise ShapeError(f"{self.kind}: expected a 2D or 3D image, got ndim={v.ndim}")

    def _filter2d(self, img: np.ndarray, s: float) -> np.ndarray:
        raise NotImplementedError

    def close(self):
        pass

    def __repr__(self):
        return f"<{type(self).__name__} strength_scale={self.strength_scale}>"


class IdentityDenoiser(Denoiser):
    kind = "identity"

    def _denoise(self, v, t):
        return v.copy()


class GaussianSmoothDenoiser(Denoiser):
    """Gaussian blur of width ``strength_scale * t`` pixels (half-sample symmetric borders)."""

    kind = "gaussian_smooth"

    def _filter2d(self, img, s):
        return ndimage.gaussian_filter(img, sigma=s, mode="reflect", truncate=4.0)


class MedianDenoiser(Denoiser):
    """3x3 median filter, applied whenever the strength is positive."""

    kind = "median"
    size = 3

    def _filter2d(self, img, s):
        return ndimage.median_filter(img, size=self.size, mode="reflect")


class SoftThresholdDCTDenoiser(Denoiser):
    """Soft-thresholding of orthonormal 2D DCT coefficients at ``strength_scale * t``.

    This is the exact proximal map of ``lam * ||DCT(x)||_1`` and hence
    firmly non-expansive.
    """

    kind = "soft_threshold_dct"

    def _filter2d(self, img, s):
        c = sfft.dctn(img, norm="ortho")
        c = np.sign(c) * np.maximum(np.abs(c) - s, 0.0)
        return sfft.idctn(c, norm="ortho")


def _grad(x):
    g = np.zeros((2,) + x.shape)
    g[0, :-1, :] = x[1:, :] - x[:-1, :]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return g


def _div(p):
    # negative adjoint of _grad
    d = np.zeros(p.shape[1:])
    d[:-1, :] += p[0, :-1, :]
    d[1:, :] -= p[0, :-1, :]
    d[:, :-1] += p[1, :, :-1]
    d[:, 1:] -= p[1, :, :-1]
    return d


def total_variation(x: np.ndarray) -> float:
    """Isotropic TV with forward differences, summed over channels."""
    if x.dtype == COMPLEX:
        return total_variation(x.real) + total_variation(x.imag)
    if x.ndim == 3:
        return sum(total_variation(x[:, :, c]) for c in range(x.shape[2]))
    g = _grad(x)
    return float(np.sum(np.sqrt(g[0] ** 2 + g[1] ** 2)))


def tv_prox(v: np.ndarray, lam: float, max_iters: int = 50, tol: float = 1e-6) -> np.ndarray:
    """``argmin_x 0.5 ||x - v||^2 + lam * TV(x)`` for a 2D real image.

    Fast gradient projection on the dual (Beck and Teboulle's accelerated
    form of Chambolle's projection), step ``1/8``, started from zero dual.
    Stops after ``max_iters`` or when the relative change of the primal
    estimate drops below ``tol``.
    """
    if lam == 0:
        return v.copy()
    step = 1.0 / (8.0 * lam)
    p = np.zeros((2,) + v.shape)
    q = p.copy()
    s = 1.0
    x = v.copy()
    for _ in range(max_iters):
        x_new = v + lam * _div(q)
        p_new = q + step * _grad(x_new)
        mag = np.maximum(1.0, np.sqrt(p_new[0] ** 2 + p_new[1] ** 2))
        p_new /= mag
        s_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * s * s))
        q = p_new + ((s - 1.0) / s_new) * (p_new - p)
        p, s = p_new, s_new
        x_next = v + lam * _div(p)
        change = np.linalg.norm(x_next - x) / max(np.linalg.norm(x_next), 1e-30)
        x = x_next
        if change < tol:
            break
    return x


class TVProxDenoiser(Denoiser):
    kind = "tv_prox"

    def __init__(self, strength_scale=1.0, shape=None, max_iters: int = 50, tol: float = 1e-6):
        super().__init__(strength_scale, shape)
        self.max_iters = int(max_iters)
        self.tol = float(tol)

    def _filter2d(self, img, s):
        return tv_prox(img, s, self.max_iters, self.tol)


@dataclass
class ExternalDenoiserConfig:
    """Where to find an external denoiser process.

    Exactly one of ``command`` (spawned, spoken to over stdin/stdout) or
    ``address`` (``host:port`` or ``unix:/path``) must be set.
    """

    command: Optional[Sequence[str]] = None
    address: Optional[str] = None
    timeout: float = 60.0
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.command is None) == (self.address is None):
            raise ValueError("set exactly one of command or address")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


class _Channel:
    """Blocking byte channel with a per-request deadline."""

    def __init__(self, cfg: ExternalDenoiserConfig):
        self.cfg = cfg
        self.proc = None
        self.sock = None
        if cfg.command is not None:
            env = dict(os.environ, **cfg.env)
            self.proc = subprocess.Popen(
                list(cfg.command), stdin=subprocess.PIPE, stdout=subprocess.PIPE, env=env, bufsize=0
            )
            self._sel = selectors.DefaultSelector()
            self._sel.register(self.proc.stdout, selectors.EVENT_READ)
        else:
            if cfg.address.startswith("unix:"):
                self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                target = cfg.address[len("unix:") :]
            else:
                host, _, port = cfg.address.rpartition(":")
                self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                target = (host or "127.0.0.1", int(port))
            self.sock.settimeout(cfg.timeout)
            self.sock.connect(target)
        self.deadline = None

    def send(self, data: bytes):
        if self.proc is not None:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        else:
            self.sock.sendall(data)

    def read(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            remaining = self.deadline - time.monotonic()
            if remaining <= 0:
                raise ExternalDenoiserTimeout(f"no complete response within {self.cfg.timeout} s")
            if self.proc is not None:
                if not self._sel.select(remaining):
                    continue
                chunk = os.read(self.proc.stdout.fileno(), n - len(buf))
            else:
                self.sock.settimeout(remaining)
                try:
                    chunk = self.sock.recv(n - len(buf))
                except socket.timeout:
                    continue
            if not chunk:
                raise DenoiserError("external denoiser closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def close(self):
        if self.proc is not None:
            self._sel.close()
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
            self.proc.stdout.close()
            self.proc = None
        if self.sock is not None:
            self.sock.close()
            self.sock = None


class ExternalDenoiser(Denoiser):
    """Client for a denoiser living in another process.

    One request is outstanding at a time; the connection is opened lazily and
    reused. After a timeout or protocol error the connection is dropped and a
    new one is made on the next call.
    """

    kind = "external"
    deterministic = False

    def __init__(self, config: ExternalDenoiserConfig, shape=None):
        super().__init__(1.0, shape)
        self.config = config
        self._channel: Optional[_Channel] = None
        self._lock = threading.Lock()

    def _denoise(self, v, t):
        with self._lock:
            if self._channel is None:
                self._channel = _Channel(self.config)
            ch = self._channel
            try:
                ch.deadline = time.monotonic() + self.config.timeout
                ch.send(protocol.encode_request(v, float(t)))
                out = protocol.decode_response(ch.read)
            except protocol.RemoteError as exc:
                raise DenoiserError(f"external denoiser reported an error: {exc}") from exc
            except (protocol.ProtocolError, struct.error, ValueError) as exc:
                self._drop()
                raise DenoiserError(f"malformed response from external denoiser: {exc}") from exc
            except DenoiserError:
                self._drop()
                raise
            except (OSError, EOFError) as exc:
                self._drop()
                raise DenoiserError(f"external denoiser I/O failure: {exc}") from exc
        if out.shape != v.shape or out.dtype != v.dtype:
            raise DenoiserError(
                f"external denoiser returned {out.shape}/{out.dtype}, expected {v.shape}/{v.dtype}"
            )
        return out

    def _drop(self):
        if self._channel is not None:
            self._channel.close()
            self._channel = None

    def close(self):
        with self._lock:
            self._drop()


def external_denoise(endpoint: ExternalDenoiserConfig, v: np.ndarray, t: float) -> np.ndarray:
    """One-shot external call; opens and closes its own connection."""
    d = ExternalDenoiser(endpoint)
    try:
        return d(v, t)
    finally:
        d.close()


def serve(read, write, handler) -> int:
    """Answer requests until end of input; returns the number served.

    ``handler(v, t)`` computes the response tensor. Exceptions it raises are
    reported to the client as status=1 responses.
    """
    served = 0
    while True:
        try:
            magic = read(4)
        except EOFError:
            return served
        try:
            if magic != protocol.WIRE_MAGIC:
                raise protocol.ProtocolError(f"bad request magic {magic!r}")
            v, t = protocol.decode_request_body(read)
        except EOFError:
            return served
        except (protocol.ProtocolError, struct.error) as exc:
            write(protocol.encode_error(f"bad request: {exc}"))
            return served
        try:
            out = handler(v, t)
            write(protocol.encode_ok(np.asarray(out, dtype=v.dtype)))
        except Exception as exc:  # reported to the peer, never fatal here
            write(protocol.encode_error(str(exc)))
        served += 1


def echo_handler(offset: float = 0.0):
    def handle(v, t):
        return v + offset if offset else v
    return handle


_KINDS = {
    "identity": IdentityDenoiser,
    "gaussian_smooth": GaussianSmoothDenoiser,
    "median": MedianDenoiser,
    "soft_threshold_dct": SoftThresholdDCTDenoiser,
    "tv_prox": TVProxDenoiser,
}


def make_denoiser(kind: str, **params) -> Denoiser:
    if kind == "external":
        return ExternalDenoiser(ExternalDenoiserConfig(**params))
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown denoiser kind {kind!r}") from None
    return cls(**params)


def denoise(d: Denoiser, v: np.ndarray, t: float) -> np.ndarray:
    return d(v, t)


@dataclass
class LipschitzEstimate:
    l_hat: float
    num_pairs_sampled: int
    max_ratio_pair: Optional[Tuple[np.ndarray, np.ndarray]]


def estimate_lipschitz(
    d: Denoiser,
    t: float,
    num_pairs: int,
    perturbation_scale: float,
    rng: np.random.Generator,
    shape,
    dtype=REAL,
    chain_length: int = 10,
) -> LipschitzEstimate:
    """Empirical lower bound on the Lipschitz constant of ``v -> d(v, t)``.

    Pairs ``(a, a + delta)`` with ``||delta|| = perturbation_scale`` are drawn
    in chains around uniform [0, 1) anchors. The first perturbation of each
    chain is random; each later one points along the previous output
    difference, a power-iteration style ascent toward the most amplified
    direction. The ratio uses the realized input difference, so the identity
    scores exactly 1.
    """
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    if not perturbation_scale > 0:
        raise ValueError("perturbation_scale must be positive")
    dtype = np.dtype(dtype)
    shape = tuple(shape)

    def draw(shp):
        if dtype == COMPLEX:
            return rng.standard_normal(shp) + 1j * rng.standard_normal(shp)
        return rng.standard_normal(shp)

    best, best_pair = 0.0, None
    a = fa = delta = None
    for i in range(num_pairs):
        if i % chain_length == 0:
            a = rng.random(shape)
            if dtype == COMPLEX:
                a = a + 1j * rng.random(shape)
            fa = d(a, t)
            delta = draw(shape)
        n = np.linalg.norm(delta)
        if n == 0:
            delta = draw(shape)
            n = np.linalg.norm(delta)
        b = a + delta * (perturbation_scale / n)
        diff_out = d(b, t) - fa
        diff_in = np.linalg.norm(b - a)
        ratio = float(np.linalg.norm(diff_out) / diff_in) if diff_in > 0 else 0.0
        if ratio > best or best_pair is None:
            best, best_pair = ratio, (a.copy(), b)
        delta = diff_out if np.any(diff_out) else draw(shape)
    return LipschitzEstimate(best, num_pairs, best_pair)
