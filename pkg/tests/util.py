"""Shared test helpers: finite-difference gradient checking and synthetic
signal construction."""

import numpy as np

from aigmdet.audio import AudioBuffer


def finite_diff_check(loss_fn, params, h=1e-5, rel_tol=1e-4, n_coords=None, rng=None):
    """Compare analytic gradients of loss_fn() against central differences.

    Returns the worst relative error; error uses a denominator floor so
    analytically-zero gradients compare at absolute 1e-6 scale.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in params:
        flat = p.data.ravel()
        grad = p.grad.ravel() if p.grad is not None else np.zeros_like(flat)
        if n_coords is None or n_coords >= len(flat):
            idxs = range(len(flat))
        else:
            idxs = rng.choice(len(flat), n_coords, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            err = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-2)
            worst = max(worst, err)
    assert worst < rel_tol, f"gradient mismatch: worst rel err {worst:.3e}"
    return worst


def sine_buffer(freq, duration_s, rate=16000, amp=0.5, channels=1):
    t = np.arange(int(duration_s * rate)) / rate
    x = amp * np.sin(2 * np.pi * freq * t)
    return AudioBuffer(np.tile(x, (channels, 1)), rate)


def click_track(bpm, duration_s, rate=16000, accent_every=0, accent_amp=1.0,
                base_amp=0.5, jitter_s=0.0, rng=None, phase_s=0.0):
    """Decaying-burst clicks on every beat; optional accents and jitter."""
    n = int(duration_s * rate)
    x = np.zeros(n)
    beat_len = 60.0 / bpm
    click_t = np.arange(int(0.02 * rate)) / rate
    click = np.exp(-click_t * 120) * np.sin(2 * np.pi * 1500 * click_t)
    k = 0
    t = phase_s
    while t < duration_s:
        tt = t
        if jitter_s and rng is not None:
            tt = t + rng.uniform(-jitter_s, jitter_s)
        start = int(round(tt * rate))
        if 0 <= start < n:
            amp = accent_amp if (accent_every and k % accent_every == 0) else base_amp
            end = min(n, start + len(click))
            x[start:end] += amp * click[:end - start]
        t += beat_len
        k += 1
    return AudioBuffer(x[None, :], rate)


def fft_peak_hz(buf, channel=0):
    x = buf.samples[channel]
    spectrum = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    peak = np.argmax(spectrum)
    return peak * buf.sample_rate / len(x)
