from .net import PSClient, PSServer, RemoteError, serve_in_thread
from .store import (
    ClientCache,
    InMemoryWeights,
    Outcome,
    ParameterServer,
    PushResult,
    ShardMap,
    UnknownClassError,
    WeightRecord,
    read_snapshot,
    snapshot_size,
)

__all__ = [
    "ClientCache",
    "InMemoryWeights",
    "Outcome",
    "PSClient",
    "PSServer",
    "ParameterServer",
    "PushResult",
    "RemoteError",
    "ShardMap",
    "UnknownClassError",
    "WeightRecord",
    "read_snapshot",
    "serve_in_thread",
    "snapshot_size",
]
