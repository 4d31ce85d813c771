"""An elastic cached filesystem over object storage, run inside a deterministic simulator."""

from __future__ import annotations

from .cluster import Cluster
from .extstore import ObjectStore
from .fsops import ClientSession, FileHandle
from .ring import Ring, placement_key
from .simnet import FaultPlan, Sim

__all__ = ["ClientSession", "Cluster", "FaultPlan", "FileHandle", "ObjectStore", "Ring", "Sim", "placement_key"]
