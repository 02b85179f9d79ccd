"""Dead reckoning from CAN velocity/steering and IMU heading.

A scalar Kalman filter fuses the bicycle-model yaw prediction (or raw
gyro rate) with the compass heading; the fused heading and the velocity
are then integrated into a planar NED-style pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose2, se2_compose, se2_inverse, wrap_angle


class NonMonotonicTime(ValueError):
    """Motion samples must carry strictly increasing timestamps."""


@dataclass(frozen=True)
class MotionSample:
    timestamp: float
    velocity: float  # m/s, from CAN
    steering_angle: float  # rad, from CAN
    compass_heading: float  # rad, from IMU
    gyro_rate: float  # rad/s, from IMU


@dataclass(frozen=True)
class OdoConfig:
    wheelbase: float = 2.7
    process_noise: float = math.radians(0.5) ** 2  # heading rate variance per second
    measurement_noise: float = math.radians(2.0) ** 2  # compass variance
    use_compass: bool = True
    predictor: str = "steering"  # "steering" (bicycle model) or "gyro"
    # odometry-edge covariance growth
    sigma_xy: float = 0.02  # m per sqrt(m traveled)
    sigma_theta: float = math.radians(0.3)


@dataclass(frozen=True)
class OdoState:
    pose: Pose2 = field(default_factory=Pose2)
    heading_variance: float = math.radians(10.0) ** 2
    last_timestamp: float = 0.0
    traveled: float = 0.0  # cumulative distance, drives edge covariance

    @property
    def heading_estimate(self) -> float:
        return self.pose.theta


def kf_step(state: OdoState, sample: MotionSample, config: OdoConfig = OdoConfig()) -> OdoState:
    """One predict/update/integrate cycle of the heading filter.

    Predict the heading with the bicycle-model yaw rate (or the gyro),
    correct it with the compass, then integrate position with the fused
    heading and the CAN velocity.
    """
    dt = sample.timestamp - state.last_timestamp
    if dt <= 0.0:
        raise NonMonotonicTime(
            f"timestamp {sample.timestamp} not after {state.last_timestamp}"
        )
    if config.predictor == "gyro":
        yaw_rate = sample.gyro_rate
    else:
        yaw_rate = sample.velocity * math.tan(sample.steering_angle) / config.wheelbase

    theta = wrap_angle(state.pose.theta + yaw_rate * dt)
    var = state.heading_variance + config.process_noise * dt

    if config.use_compass:
        innovation = wrap_angle(sample.compass_heading - theta)
        gain = var / (var + config.measurement_noise)
        theta = wrap_angle(theta + gain * innovation)
        var = (1.0 - gain) * var

    step = sample.velocity * dt
    pose = Pose2(
        state.pose.x + step * math.cos(theta),
        state.pose.y + step * math.sin(theta),
        theta,
    )
    return OdoState(pose, var, sample.timestamp, state.traveled + abs(step))


def run_filter(
    samples,
    config: OdoConfig = OdoConfig(),
    initial: OdoState | None = None,
    initial_pose: Pose2 | None = None,
):
    """Run kf_step over a sample stream; returns the list of states."""
    samples = list(samples)
    if initial is not None:
        state = initial
    else:
        # start one nominal sample interval before the stream
        if len(samples) >= 2:
            t0 = samples[0].timestamp - (samples[1].timestamp - samples[0].timestamp)
        elif samples:
            t0 = samples[0].timestamp - 1.0
        else:
            t0 = 0.0
        if initial_pose is not None:
            # an externally supplied start pose comes with a trusted heading
            state = OdoState(
                pose=initial_pose,
                heading_variance=math.radians(0.1) ** 2,
                last_timestamp=t0,
            )
        else:
            state = OdoState(last_timestamp=t0)
    out = []
    for sample in samples:
        state = kf_step(state, sample, config)
        out.append(state)
    return out


def relative_pose(state_a: OdoState, state_b: OdoState, config: OdoConfig = OdoConfig()):
    """Motion of b expressed in a's frame, with a distance-grown covariance."""
    rel = se2_compose(se2_inverse(state_a.pose), state_b.pose)
    d = abs(state_b.traveled - state_a.traveled)
    dtheta = abs(wrap_angle(state_b.pose.theta - state_a.pose.theta))
    var_xy = max(config.sigma_xy**2 * d, 1e-8)
    var_theta = max(config.sigma_theta**2 * (dtheta + d / config.wheelbase), 1e-10)
    cov = np.diag([var_xy, var_xy, var_theta])
    return rel, cov


def save_motion_log(samples, path) -> None:
    """Delimited-text rows: timestamp velocity steering compass gyro."""
    with open(path, "w") as f:
        f.write("# timestamp velocity steering_angle compass_heading gyro_rate\n")
        for s in samples:
            f.write(
                f"{s.timestamp:.6f} {s.velocity:.6f} {s.steering_angle:.9f} "
                f"{s.compass_heading:.9f} {s.gyro_rate:.9f}\n"
            )


def load_motion_log(path) -> list[MotionSample]:
    samples = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 5:
                raise ValueError(f"bad motion-log row: {line!r}")
            samples.append(MotionSample(*vals))
    return samples


def save_trajectory(rows, path) -> None:
    """rows: iterable of (timestamp, Pose2)."""
    with open(path, "w") as f:
        f.write("# timestamp x y theta\n")
        for ts, pose in rows:
            f.write(f"{ts:.6f} {pose.x:.6f} {pose.y:.6f} {pose.theta:.9f}\n")


def load_trajectory(path) -> list[tuple[float, Pose2]]:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            ts, x, y, theta = (float(v) for v in line.split())
            rows.append((ts, Pose2(x, y, theta)))
    return rows
