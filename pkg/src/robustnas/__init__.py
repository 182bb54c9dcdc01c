"""Robust graph neural architecture search with defensive structure masks."""

from .attacks import AttackProxyConfig, attack_dice, attack_random, generate_proxy_set
from .layers import Dims
from .graph import Graph, SbmParams, generate_sbm, load_dataset, save_dataset, split_nodes
from .search import (EvoConfig, RobustnessReport, evolutionary_search, fitness, kl_divergence,
                     retrain_from_scratch, robustness_metric)
from .space import Genome, LayerGene, SearchSpaceConfig, random_genome, recover_named_arch
from .supernet import Supernet, TrainConfig, build_supernet, infer, train_supernet

__version__ = "0.1.0"
