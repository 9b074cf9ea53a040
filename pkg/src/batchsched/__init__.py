"""Batch scheduler engine and discrete-event cluster simulator."""

from .model import Job, JobState, Node, Policy, PropertyExpr, Queue, ReservationStatus
from .store import JobFilter, Store

__version__ = "0.1.0"

__all__ = [
    "Job", "JobFilter", "JobState", "Node", "Policy", "PropertyExpr", "Queue",
    "ReservationStatus", "Store",
]
