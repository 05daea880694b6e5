"""Iterative event warping, bilinear splatting and the contrast loss."""

from ..core import EventSlice, FlowSequence
from .backends import (
    BACKENDS,
    Backend,
    NaiveBackend,
    PaddedBackend,
    ParallelBackend,
    build_iwe_stack,
    contrast_loss_backward,
    get_backend,
    loss_and_grad,
)
from .instrument import PHASES, PhaseRecorder
from .kernels import sample_flow, splat_bilinear, warp_event
from .loss import contrast_loss, loss_seeds
from .window import EPS, EventTrajectory, IweStack, WarpWindow


def rsat(slice_: EventSlice, flows: FlowSequence, backend="parallel") -> float:
    """Loss under ``flows`` divided by the loss under zero flow (< 1: deblurred)."""
    zero = FlowSequence(flows.u * 0.0, flows.edges)
    base, _, _ = loss_and_grad(WarpWindow(slice_, zero), backend, need_grad=False)
    if base == 0.0:
        raise ValueError("RSAT undefined: zero-flow loss is 0 (empty slice?)")
    loss, _, _ = loss_and_grad(WarpWindow(slice_, flows), backend, need_grad=False)
    return loss / base


__all__ = [
    "BACKENDS", "Backend", "NaiveBackend", "PaddedBackend", "ParallelBackend",
    "build_iwe_stack", "contrast_loss_backward", "get_backend", "loss_and_grad",
    "PHASES", "PhaseRecorder", "sample_flow", "splat_bilinear", "warp_event",
    "contrast_loss", "loss_seeds", "EPS", "EventTrajectory", "IweStack", "WarpWindow", "rsat",
]
