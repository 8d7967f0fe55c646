"""User-space network monitoring engine.

Forwards traffic read from a layer-3 port through ordinary layer-4
sockets, inspecting outgoing payloads for configured byte patterns and
logging forwarded datagrams to PCAPNG, while telemetry watches the same
stream passively.  `antproxy.control.ProxyService` composes the pieces;
the `antproxy` console script drives it.
"""

from .capture_log import (
    CaptureWriter,
    LogEvent,
    LogMode,
    LogPolicy,
    StorageSink,
    read_capture,
    validate_capture,
)
from .control import (
    BenchScenario,
    EngineConfig,
    ProxyService,
    bench_run,
    main,
)
from .dpi import (
    Action,
    DpiContext,
    LeakEvent,
    Pattern,
    PolicyStore,
    compile_ruleset,
    default_patterns,
)
from .forwarder import Engine, ForwarderConfig
from .net_harness import SimNet, TunPort
from .packet import Datagram, parse_datagram, serialize_datagram
from .telemetry import TelemetryHub, extract_features, export_features

__version__ = "0.1.0"

__all__ = [
    "Action",
    "BenchScenario",
    "CaptureWriter",
    "Datagram",
    "DpiContext",
    "Engine",
    "EngineConfig",
    "ForwarderConfig",
    "LeakEvent",
    "LogEvent",
    "LogMode",
    "LogPolicy",
    "Pattern",
    "PolicyStore",
    "ProxyService",
    "SimNet",
    "StorageSink",
    "TelemetryHub",
    "TunPort",
    "bench_run",
    "compile_ruleset",
    "default_patterns",
    "export_features",
    "extract_features",
    "main",
    "parse_datagram",
    "read_capture",
    "serialize_datagram",
    "validate_capture",
    "__version__",
]
