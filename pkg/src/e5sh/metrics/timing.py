"""Rates, speedups and the picking-cycle estimate."""

from __future__ import annotations

# per-cycle perception time, seconds
EDGE_PER_CYCLE_S = 1.033
ROBOT_PC_PER_CYCLE_S = 4.0
CYCLES_PER_PICK = 3


def throughput(fps: float, frame_bytes: float) -> float:
    """Kilobytes per second (1 kB = 1000 bytes)."""
    if fps < 0:
        raise ValueError("fps must be non-negative")
    return fps * frame_bytes / 1000.0


def cumulative_fps(t_seg: float, t_overhead: float = 0.0) -> float:
    """End-to-end frame rate from per-frame segmentation and overhead seconds."""
    if t_seg <= 0 or t_overhead < 0:
        raise ValueError("segmentation time must be positive and overhead non-negative")
    return 1.0 / (t_seg + t_overhead)


def speedup(fps_a: float, fps_b: float) -> float:
    if fps_a <= 0 or fps_b <= 0:
        raise ValueError("frame rates must be positive")
    return fps_a / fps_b


def picking_cycle_estimate(perception_cycles: int, per_cycle_s: float,
                           fixed_motion_s: float = 0.0) -> float:
    if perception_cycles < 0 or per_cycle_s < 0 or fixed_motion_s < 0:
        raise ValueError("arguments must be non-negative")
    return perception_cycles * per_cycle_s + fixed_motion_s
