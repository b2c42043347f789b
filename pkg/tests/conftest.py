import numpy as np
import pytest

from morphplan.trajectory import fit_min_jerk


def figure_eight(peak_speed=1.5, ax=1.2, ay=0.6, height=1.0, radius=0.211, laps=1):
    """Smooth figure-eight reference built from lemniscate waypoints, with the
    durations scaled so the peak speed matches the request."""
    n_seg = 8 * laps
    ts = np.arange(n_seg + 1) / n_seg * 2.0 * np.pi * laps
    wps = np.stack([
        ax * np.sin(ts),
        ay * np.sin(2.0 * ts),
        np.full_like(ts, height),
        np.full_like(ts, radius),
    ], axis=1)
    b0 = np.zeros((3, 4))
    b0[0] = wps[0]
    b1 = np.zeros((3, 4))
    b1[0] = wps[-1]
    durations = np.full(n_seg, 1.0)
    traj = fit_min_jerk(wps[1:-1], durations, b0, b1)
    times = np.linspace(0, traj.total_time, 600)
    speeds = np.linalg.norm(traj.sample(times, orders=(1,))[:, 0, :3], axis=1)
    scale = speeds.max() / peak_speed
    return fit_min_jerk(wps[1:-1], durations * scale, b0, b1)


@pytest.fixture(scope="session")
def fig8_traj():
    return figure_eight()
