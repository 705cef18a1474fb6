"""Shared fixtures-by-construction for the test suite."""

import numpy as np

from evcs_forecast.sessions import ChargingSession


def worked_session(charger_id=1, shift=0):
    """Arrive 2.5, done 5.2, leave 6.8; readings 14, 20, 26 at hours 3..5."""
    return ChargingSession(
        charger_id=charger_id, t_arr=2.5 + shift, t_dc=5.2 + shift, t_de=6.8 + shift,
        e_arr=10.0, e_dc=26.5, e_de=26.5, e_user=30.0,
        hourly_energy={3 + shift: 14.0, 4 + shift: 20.0, 5 + shift: 26.0, 6 + shift: 26.5},
    )


def minute_oracle(s: ChargingSession):
    """Brute-force per-hour features by walking the stay one minute at a time.

    The cumulative energy curve is the piecewise-linear interpolation of every
    known reading. Each minute's energy increment and occupancy is added to
    the hour ``(t-1, t]`` that contains it.
    """
    knots_t = [s.t_arr] + sorted(s.hourly_energy) + [s.t_dc, s.t_de]
    knots_e = [s.e_arr] + [s.hourly_energy[t] for t in sorted(s.hourly_energy)] + [s.e_dc, s.e_de]
    order = np.argsort(knots_t, kind="stable")
    kt = np.asarray(knots_t)[order]
    ke = np.asarray(knots_e)[order]
    start = round(s.t_arr * 60)
    stop = round(s.t_de * 60)
    minutes = np.arange(start, stop)
    e0 = np.interp(minutes / 60.0, kt, ke)
    e1 = np.interp((minutes + 1) / 60.0, kt, ke)
    hour = minutes // 60 + 1  # minute [m, m+1) lies in hour floor(m/60)+1
    out = {}
    for t in np.unique(hour):
        m = hour == t
        energy = float(np.sum(e1[m] - e0[m]))
        util = float(m.sum()) / 60.0
        out[int(t)] = (energy, util, energy / (s.e_user - s.e_arr) * 100.0)
    return out
