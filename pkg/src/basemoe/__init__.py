"""Balanced expert routing: auction assignment, the gated expert layer and a simulated sharded pipeline."""

__version__ = "0.1.0"

from .core import (
    Assignment, ContractError, DivergenceError, ExpertNetwork, ExpertSet, FeedForwardBlock,
    ParseError, ScoreMatrix, TokenBatch, init_experts, seeded_rng,
)
from .assignment import (
    AssignmentResult, AuctionConfig, assign_greedy, compute_scores, objective_of, solve_balanced,
    solve_oracle,
)
from .baselayer import LayerGradients, LayerOutput, base_backward, base_forward, expert_forward
from .routing import RoutingTrace, all_to_all, route_and_apply, shuffle, sort_by_expert
from .trainer import ClipConfig, SyntheticTask, TrainResult, clip_gradients, train_toy
from .analysis import BalanceReport, SpecializationTable, balance_report, specialization_table, throughput_report

__all__ = [
    "Assignment", "AssignmentResult", "AuctionConfig", "BalanceReport", "ClipConfig", "ContractError",
    "DivergenceError", "ExpertNetwork", "ExpertSet", "FeedForwardBlock", "LayerGradients", "LayerOutput",
    "ParseError", "RoutingTrace", "ScoreMatrix", "SpecializationTable", "SyntheticTask", "TokenBatch",
    "TrainResult", "all_to_all", "assign_greedy", "balance_report", "base_backward", "base_forward",
    "clip_gradients", "compute_scores", "expert_forward", "init_experts", "objective_of",
    "route_and_apply", "seeded_rng", "shuffle", "solve_balanced", "solve_oracle", "sort_by_expert",
    "specialization_table", "throughput_report", "train_toy",
]
