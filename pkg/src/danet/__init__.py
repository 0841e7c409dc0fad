"""danet: delay-aware cross-layer network control, simulated and verified."""

from .bp import (
    DTBP,
    MIN_RESOURCE,
    NetIndex,
    PolicyConfig,
    PriceSim,
    decide_links,
    flow_control_mean,
    price_step,
    sample_arrival,
    simulate_tandem,
    tandem_step,
)
from .crosslayer import CrossLayerConfig, CrossLayerRun
from .errors import ConfigError, DomainError, NotReadyError, RoutingHoleError
from .harness import (
    Packet,
    RunRecord,
    ScenarioConfig,
    StabilityVerdict,
    export,
    load_record,
    load_scenario,
    run_scenario,
    stability_check,
    sweep_k,
)
from .netmodel import (
    Commodity,
    FeasibilityReport,
    NetworkGraph,
    RatePoint,
    UtilitySpec,
    build_grid,
    build_tandem,
    check_feasible,
    gg1_delay_bound,
    objective_value,
)
from .routing import (
    AcyclicityCertificate,
    CommoditySubgraph,
    NetRateAccumulator,
    NetRateSnapshot,
    build_subgraph,
    check_assumption2,
    check_loop_free,
    map_rate_point,
    snapshot_net_rates,
)
from .scheduler import (
    ArrivalEstimator,
    SchedulerState,
    TokenRateTable,
    split_arrival,
    token_process_run,
    token_rates,
)
from .tandem import enumerate_chain, stationary, verify_monotone

__version__ = "0.1.0"
