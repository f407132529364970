"""Text file formats: flat key = value configs, CSV latents/schedules,
token lists, and report files. All writes are atomic (temp file + rename)
and all floats are printed with 17 significant digits so CSV round-trips
are lossless for float64.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import ConfigError, DataError

FLOAT_FMT = "%.17g"


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- flat key = value configs ------------------------------------------------


def parse_flat_config(text: str, recognized: dict) -> dict:
    """Parse `key = value` lines; `#` starts a comment line.

    `recognized` maps key -> converter; unknown keys are errors so typos
    cannot silently change a run.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        value = value.strip()
        if key not in recognized:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            out[key] = recognized[key](value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return out


def format_flat_config(pairs) -> str:
    lines = []
    for key, value in pairs:
        if isinstance(value, float):
            value = FLOAT_FMT % value
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# -- latents -------------------------------------------------------------------


def write_latent_csv(path: str, latent: np.ndarray) -> None:
    """Row-major, one frame per line, comma-separated, 17 significant digits."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 2:
        raise DataError(f"latent must be 2-D, got shape {latent.shape}")
    rows = [",".join(FLOAT_FMT % v for v in row) for row in latent]
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_latent_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line:
                continue
            rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise DataError(f"{path}: empty latent file")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataError(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.array(rows, dtype=np.float64)


def write_latent(path: str, latent: np.ndarray) -> None:
    """CSV or binary container, chosen by extension."""
    if path.endswith(".csv"):
        write_latent_csv(path, latent)
    else:
        from .checkpoint import save_latent
        save_latent(path, latent)


def read_latent(path: str) -> np.ndarray:
    if path.endswith(".csv"):
        return read_latent_csv(path)
    from .checkpoint import load_latent
    return load_latent(path)


# -- tokens / masks ---------------------------------------------------------------


def read_tokens(path: str) -> np.ndarray:
    """Whitespace-separated integer ids."""
    with open(path, "r", encoding="utf-8") as f:
        parts = f.read().split()
    if not parts:
        raise DataError(f"{path}: empty token file")
    try:
        return np.array([int(p) for p in parts], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_tokens(path: str, tokens) -> None:
    atomic_write_text(path, " ".join(str(int(t)) for t in tokens) + "\n")


def read_mask(path: str) -> np.ndarray:
    """Whitespace-separated 0/1 flags, one per frame."""
    with open(path, "r", encoding="utf-8") as f:
        parts = f.read().split()
    if not parts:
        raise DataError(f"{path}: empty mask file")
    values = set(parts)
    if not values <= {"0", "1"}:
        raise DataError(f"{path}: mask entries must be 0 or 1, got {sorted(values - {'0', '1'})}")
    return np.array([p == "1" for p in parts], dtype=bool)


# -- CSV reports --------------------------------------------------------------------


def write_schedule_csv(path: str, schedule) -> None:
    lines = ["t,omega,delta"]
    for t in range(schedule.step_count):
        lines.append(f"{t + 1},{FLOAT_FMT % schedule.omegas[t]},"
                     f"{FLOAT_FMT % schedule.deltas[t]}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_loss_csv(path: str, losses) -> None:
    lines = ["step,loss"]
    lines.extend(f"{i + 1},{FLOAT_FMT % v}" for i, v in enumerate(losses))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_ablation_csv(path: str, rows) -> None:
    lines = ["schedule,steps,latent_mse"]
    lines.extend(f"{kind},{T},{FLOAT_FMT % err}" for kind, T, err in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_ablation_steps_csv(path: str, step_rows) -> None:
    lines = ["schedule,steps,t,delta_after,mse_after_step"]
    lines.extend(f"{kind},{T},{t},{FLOAT_FMT % d},{FLOAT_FMT % e}"
                 for kind, T, t, d, e in step_rows)
    atomic_write_text(path, "\n".join(lines) + "\n")
