"""Coherent CN-side caching for disaggregated memory, on a simulated fabric."""

from .adaptive import (LatencyBuffers, ProfitInputs, SwitchResult, break_even_threshold,
                       default_mode, mode_check_and_update, profit, switch_mode)
from .baselines import CMCacheEngine, Manager, NoCacheEngine
from .cache_core import BufferPool, CacheEngine, EngineConfig, OpTimeout, RangeNotContained
from .cache_index import HopscotchIndex, IndexConfig, InsertStatus, lookup_remote
from .cluster import Cluster, ClusterConfig
from .coordinator import Coordinator
from .fabric import (Fabric, FabricConfig, NodeDead, NodeKind, OutOfBounds, Misaligned,
                     RemoteAddr)
from .kernels import BACKEND
from .layout import CacheHeader
from .owner_tracking import DirectoryFull, OwnerDirectory, TrackingMode, TrackingPolicy
from .sim import Event, Join, Scheduler, run_sync

__version__ = "0.1.0"
