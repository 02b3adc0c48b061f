"""Topology-aware dual-role attention networks for information cascade prediction."""

__version__ = "0.1.0"

from .data import (Cascade, CascadeCorpus, PrefixInstance, SocialGraph, Vocab, load_cascades,
                   load_graph, make_prefix_instances, split_corpus, time_bin)
from .estimator import TanDrud
from .graphembed import Node2Vec, WalkConfig, cosine_similarity_matrix, node2vec_walks, train_sgns
from .model import ModelConfig, ModelParams, init_params
from .trainer import Metrics, TrainConfig, evaluate, infer_tree, synth_generate, train

__all__ = [
    "Cascade", "CascadeCorpus", "PrefixInstance", "SocialGraph", "Vocab", "load_cascades",
    "load_graph", "make_prefix_instances", "split_corpus", "time_bin", "TanDrud", "Node2Vec",
    "WalkConfig", "cosine_similarity_matrix", "node2vec_walks", "train_sgns", "ModelConfig",
    "ModelParams", "init_params", "Metrics", "TrainConfig", "evaluate", "infer_tree",
    "synth_generate", "train",
]
