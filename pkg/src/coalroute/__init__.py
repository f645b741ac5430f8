"""Collaborative vehicle routing as a coalitional bargaining game.

A library and CLI covering the full pipeline: delivery-instance generation,
exact routing oracles (single-vehicle TSP and uncapacitated multi-depot VRP),
cooperative-game values (characteristic tables, Shapley values, best
per-capita coalitions), a random-proposer alternating-offers bargaining
environment, scripted baseline bots, a multi-agent PPO trainer with
counterfactual response baselines, and evaluation metrics.
"""

__version__ = "0.1.0"
