"""Charging-session records: parsing, validation, serialization and synthesis.

Time is measured in hours on one global clock. Integer timestamp ``t``
labels the interval ``(t-1, t]`` and ``hourly_energy[t]`` is the cumulative
battery energy read at the instant ``t``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from email.utils import parsedate_to_datetime

import numpy as np

from .numerics import RngStream

SESSION_FIELDS = ("charger_id", "t_arr", "t_dc", "t_de", "e_arr", "e_dc", "e_de", "e_user")
CSV_HEADER = SESSION_FIELDS + ("hour", "e_hour")


class SessionParseError(ValueError):
    """Malformed input row; message names the row and the field."""


class SessionValidationError(ValueError):
    """A parsed session breaks one of the record invariants."""


@dataclass
class ChargingSession:
    charger_id: int
    t_arr: float
    t_dc: float
    t_de: float
    e_arr: float
    e_dc: float
    e_de: float
    e_user: float
    hourly_energy: dict[int, float] = field(default_factory=dict)

    def interior_hours(self) -> range:
        """Integer instants strictly between arrival and departure."""
        return range(math.floor(self.t_arr) + 1, math.ceil(self.t_de))

    def energy_at(self, t: int) -> float:
        """Cumulative energy at integer instant ``t`` (``e_dc`` once done charging)."""
        if t >= self.t_dc:
            return self.e_dc
        return self.hourly_energy[t]


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self):
        return f"{self.field}: {self.rule}"


def validate_session(s: ChargingSession, n_chargers: int | None = None) -> list[Violation]:
    out = []
    if not isinstance(s.charger_id, (int, np.integer)) or s.charger_id < 1:
        out.append(Violation("charger_id", "must be an integer >= 1"))
    elif n_chargers is not None and s.charger_id > n_chargers:
        out.append(Violation("charger_id", f"must be <= {n_chargers}"))
    for name in SESSION_FIELDS[1:]:
        if not math.isfinite(getattr(s, name)):
            out.append(Violation(name, "must be finite"))
    if out:
        return out
    if not s.t_arr < s.t_dc:
        out.append(Violation("t_dc", "must be after t_arr"))
    if not s.t_dc <= s.t_de:
        out.append(Violation("t_de", "must not precede t_dc"))
    if not s.e_arr <= s.e_dc:
        out.append(Violation("e_dc", "must be >= e_arr"))
    if s.e_de != s.e_dc:
        out.append(Violation("e_de", "must equal e_dc (no energy change after charging is done)"))
    if not s.e_user > s.e_arr:
        out.append(Violation("e_user", "must exceed e_arr (demand-satisfaction denominator)"))

    prev = s.e_arr
    for t in s.interior_hours():
        if t not in s.hourly_energy:
            out.append(Violation(f"hourly_energy[{t}]", "missing reading inside the session"))
            continue
        e = s.hourly_energy[t]
        if not math.isfinite(e):
            out.append(Violation(f"hourly_energy[{t}]", "must be finite"))
            continue
        if e < prev:
            out.append(Violation(f"hourly_energy[{t}]", "decreases"))
        if e < s.e_arr or e > s.e_dc:
            out.append(Violation(f"hourly_energy[{t}]", "outside [e_arr, e_dc]"))
        if t >= s.t_dc and e != s.e_dc:
            out.append(Violation(f"hourly_energy[{t}]", "must equal e_dc after done-charging"))
        prev = max(prev, e)
    for t in s.hourly_energy:
        if t not in s.interior_hours():
            out.append(Violation(f"hourly_energy[{t}]", "outside the session"))
    return out


def _check(s: ChargingSession, where: str) -> ChargingSession:
    problems = validate_session(s)
    if problems:
        raise SessionValidationError(f"{where}: " + "; ".join(map(str, problems)))
    return s


# --------------------------------------------------------------------------
# JSON / CSV
# --------------------------------------------------------------------------

def session_to_dict(s: ChargingSession) -> dict:
    d = {name: getattr(s, name) for name in SESSION_FIELDS}
    d["charger_id"] = int(s.charger_id)
    d["hourly_energy"] = {str(t): s.hourly_energy[t] for t in sorted(s.hourly_energy)}
    return d


def dumps_json(sessions: list[ChargingSession]) -> str:
    return json.dumps([session_to_dict(s) for s in sessions], indent=1)


def _field(obj: dict, name: str, row: int, kind):
    if name not in obj:
        raise SessionParseError(f"row {row}: missing field {name!r}")
    v = obj[name]
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise SessionParseError(f"row {row}: field {name!r} must be an integer, got {v!r}")
        return v
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SessionParseError(f"row {row}: field {name!r} must be a number, got {v!r}")
    return float(v)


def _parse_json(text: str) -> list[ChargingSession]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SessionParseError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, list):
        raise SessionParseError("top-level JSON value must be an array of sessions")
    out = []
    for row, obj in enumerate(data):
        if not isinstance(obj, dict):
            raise SessionParseError(f"row {row}: expected an object")
        kw = {name: _field(obj, name, row, int if name == "charger_id" else float)
              for name in SESSION_FIELDS}
        raw = obj.get("hourly_energy", {})
        if not isinstance(raw, dict):
            raise SessionParseError(f"row {row}: field 'hourly_energy' must be an object")
        hourly = {}
        for key, val in raw.items():
            try:
                t = int(key)
            except ValueError:
                raise SessionParseError(f"row {row}: hourly_energy key {key!r} is not an integer") from None
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise SessionParseError(f"row {row}: hourly_energy[{key}] must be a number")
            hourly[t] = float(val)
        out.append(_check(ChargingSession(**kw, hourly_energy=hourly), f"row {row}"))
    return out


def dumps_csv(sessions: list[ChargingSession]) -> str:
    """One row per (session, interior hour); hourless sessions get one row with blank hour."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for s in sessions:
        head = [int(s.charger_id)] + [repr(float(getattr(s, n))) for n in SESSION_FIELDS[1:]]
        hours = sorted(s.hourly_energy)
        if not hours:
            w.writerow(head + ["", ""])
        for t in hours:
            w.writerow(head + [t, repr(s.hourly_energy[t])])
    return buf.getvalue()


def _parse_csv(text: str) -> list[ChargingSession]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise SessionParseError(f"line 1: header must be {','.join(CSV_HEADER)}")
    out = []
    current_key, current, start_line = None, None, 0
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise SessionParseError(f"line {line_no}: expected {len(CSV_HEADER)} columns, got {len(row)}")
        try:
            key = (int(row[0]),) + tuple(float(v) for v in row[1:8])
        except ValueError as exc:
            names = [n for n, v in zip(SESSION_FIELDS, row) if not _is_number(v)]
            raise SessionParseError(f"line {line_no}: field {names[0] if names else '?'!r} is not numeric") from exc
        if key != current_key:
            if current is not None:
                out.append(_check(current, f"line {start_line}"))
            current = ChargingSession(*key)
            current_key, start_line = key, line_no
        if row[8].strip() == "" and row[9].strip() == "":
            continue
        try:
            current.hourly_energy[int(row[8])] = float(row[9])
        except ValueError:
            raise SessionParseError(f"line {line_no}: field 'hour'/'e_hour' is not numeric") from None
    if current is not None:
        out.append(_check(current, f"line {start_line}"))
    return out


def _is_number(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def parse_sessions(text: str) -> list[ChargingSession]:
    """Parse the canonical JSON array or the 10-column CSV layout."""
    stripped = text.lstrip()
    if stripped.startswith("[") or stripped.startswith("{"):
        return _parse_json(text)
    if not stripped:
        return []
    return _parse_csv(text)


def load_sessions(path) -> list[ChargingSession]:
    with open(path, encoding="utf-8") as fh:
        return parse_sessions(fh.read())


# --------------------------------------------------------------------------
# Synthetic sessions
# --------------------------------------------------------------------------

@dataclass
class SynthConfig:
    horizon_hours: int = 720
    chargers: int = 5
    arrival_rate: float = 0.1
    mean_stay_hours: float = 4.0
    mean_demand_kwh: float = 15.0
    charge_rate_kw: float = 6.6
    noise_std: float = 5.0
    seed: int = 0

    def validate(self):
        if self.horizon_hours < 48:
            raise ValueError("horizon_hours must be >= 48")
        if self.chargers < 1:
            raise ValueError("chargers must be >= 1")
        for name in ("mean_stay_hours", "mean_demand_kwh", "charge_rate_kw"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.arrival_rate < 0 or self.noise_std < 0:
            raise ValueError("arrival_rate and noise_std must be nonnegative")


def generate_synthetic(cfg: SynthConfig) -> list[ChargingSession]:
    """Poisson arrivals per charger with constant-power charging.

    All instants fall on whole minutes. An EV that arrives while its charger
    is occupied plugs in when the previous EV leaves; sessions that would not
    end inside the horizon are dropped.
    """
    cfg.validate()
    if cfg.arrival_rate == 0:
        return []
    horizon_min = cfg.horizon_hours * 60
    sessions = []
    for charger in range(1, cfg.chargers + 1):
        rng = RngStream(cfg.seed, charger).generator()
        clock = 0.0
        free_at = 0
        while True:
            clock += rng.exponential(1.0 / cfg.arrival_rate)
            if clock >= cfg.horizon_hours:
                break
            m_arr = max(math.ceil(clock * 60.0), free_at)
            stay = max(1, round(rng.exponential(cfg.mean_stay_hours) * 60.0))
            demand = -1.0
            while demand <= 0:
                demand = rng.normal(cfg.mean_demand_kwh, cfg.noise_std)
            e_arr = float(rng.uniform(2.0, 30.0))
            charge_min = max(1, min(round(demand / cfg.charge_rate_kw * 60.0), stay))
            m_dc = m_arr + charge_min
            m_de = m_arr + stay
            free_at = m_de
            if m_de > horizon_min:
                continue
            rate_per_min = cfg.charge_rate_kw / 60.0
            e_dc = e_arr + rate_per_min * charge_min
            hourly = {}
            for t in range(m_arr // 60 + 1, -(-m_de // 60)):
                hourly[t] = e_arr + rate_per_min * min(60 * t - m_arr, charge_min)
            sessions.append(ChargingSession(
                charger_id=charger,
                t_arr=m_arr / 60.0, t_dc=m_dc / 60.0, t_de=m_de / 60.0,
                e_arr=e_arr, e_dc=e_dc, e_de=e_dc, e_user=e_arr + demand,
                hourly_energy=hourly,
            ))
    sessions.sort(key=lambda s: (s.t_arr, s.charger_id))
    return sessions


# --------------------------------------------------------------------------
# ACN adapter
# --------------------------------------------------------------------------

def _acn_time(value) -> float:
    return parsedate_to_datetime(value).timestamp() / 3600.0


def from_acn(text: str, origin_hour: float | None = None) -> list[ChargingSession]:
    """Map an ACN-Data session export onto :class:`ChargingSession` records.

    Field mapping:

    - ``connectionTime`` -> ``t_arr``; ``doneChargingTime`` -> ``t_dc`` (falls
      back to ``disconnectTime`` when missing); ``disconnectTime`` -> ``t_de``.
      Times become hours since ``origin_hour`` (default: the hour holding the
      earliest connection).
    - ``stationID`` -> ``charger_id``, numbered 1..N in sorted order.
    - ACN reports delivered energy only, so ``e_arr = 0`` and
      ``e_dc = e_de = kWhDelivered``.
    - ``userInputs[-1].kWhRequested`` -> ``e_user``, falling back to
      ``kWhDelivered`` when absent.
    - Intermediate readings assume constant power between connection and
      done-charging.

    Sessions with zero delivered energy or inconsistent times are skipped.
    """
    data = json.loads(text)
    items = data["_items"] if isinstance(data, dict) else data
    rows = []
    for it in items:
        try:
            t_arr = _acn_time(it["connectionTime"])
            t_de = _acn_time(it["disconnectTime"])
            done = it.get("doneChargingTime")
            t_dc = _acn_time(done) if done else t_de
        except (KeyError, TypeError, ValueError):
            continue
        energy = float(it.get("kWhDelivered") or 0.0)
        requested = None
        inputs = it.get("userInputs") or []
        if inputs and isinstance(inputs[-1], dict):
            requested = inputs[-1].get("kWhRequested")
        rows.append((str(it.get("stationID", it.get("spaceID", "?"))), t_arr, min(t_dc, t_de), t_de,
                     energy, float(requested) if requested else energy))
    if not rows:
        return []
    stations = {sid: i + 1 for i, sid in enumerate(sorted({r[0] for r in rows}))}
    if origin_hour is None:
        origin_hour = math.floor(min(r[1] for r in rows))
    out = []
    for sid, t_arr, t_dc, t_de, energy, requested in rows:
        t_arr, t_dc, t_de = t_arr - origin_hour, t_dc - origin_hour, t_de - origin_hour
        if energy <= 0 or not t_arr < t_dc <= t_de:
            continue
        s = ChargingSession(stations[sid], t_arr, t_dc, t_de, 0.0, energy, energy,
                            requested if requested > 0 else energy)
        for t in s.interior_hours():
            s.hourly_energy[t] = energy * min(1.0, (t - t_arr) / (t_dc - t_arr))
        if not validate_session(s):
            out.append(s)
    out.sort(key=lambda s: (s.t_arr, s.charger_id))
    return out
