"""Sigma dataflow engine.

Financial models as graphs of processors joined by synchronous or
asynchronous edges, with runtime graph modification, a reactive layer,
distribution spaces, discrete-event simulation and a provenance registry.
"""
from __future__ import annotations

from .contributions import Action, Registry, RegistryError, Right, classify
from .distribution import (
    DeploymentPlan,
    InlinePool,
    LoopCondition,
    Policy,
    WorkerContext,
    assign_spaces,
    feedback,
    parse_plan,
    resequence,
    split_join,
)
from .dsl import DslError, ModelDocument, parse, parse_expression
from .dsl import format as format_model
from .endpoints import DatasetEndpoint, open_sink, open_source, read_dataset, write_dataset
from .graph import (
    ASYNC,
    SYNC,
    Edge,
    Fragment,
    GraphError,
    Kind,
    ProcessorSpec,
    StreamGraph,
    SubgraphTemplate,
    SynchronicityMode,
    chain,
    compose,
    connect,
    partition_spaces,
    validate,
)
from .metamodel import execute, replay, snapshot
from .plasticity import GraphVersion, apply_modification, first_arrival_predicate
from .reactives import ReactiveGraph, lift
from .runtime import ExecMode, RunConfig, RunReport, cancel, oracle_run, run, submit
from .simulation import Environment, des_run, scale_instant, scale_time, timed_source

__version__ = "0.1.0"

__all__ = [
    "ASYNC", "SYNC", "Action", "DatasetEndpoint", "DeploymentPlan", "DslError", "Edge", "Environment",
    "ExecMode", "Fragment", "GraphError", "GraphVersion", "InlinePool", "Kind", "LoopCondition",
    "ModelDocument", "Policy", "ProcessorSpec", "ReactiveGraph", "Registry", "RegistryError", "Right",
    "RunConfig", "RunReport", "StreamGraph", "SubgraphTemplate", "SynchronicityMode", "WorkerContext",
    "apply_modification", "assign_spaces", "cancel", "chain", "classify", "compose", "connect", "des_run",
    "execute", "feedback", "first_arrival_predicate", "format_model", "lift", "open_sink", "open_source",
    "oracle_run", "parse", "parse_expression", "parse_plan", "partition_spaces", "read_dataset", "replay",
    "resequence", "run", "scale_instant", "scale_time", "snapshot", "split_join", "submit", "timed_source",
    "validate", "write_dataset",
]
