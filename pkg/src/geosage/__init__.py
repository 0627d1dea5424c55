"""Geographical sparse additive generative model for spatial item recommendation."""

from .corpus import Corpus, build_corpus, load_corpus, parse_checkins, save_corpus, split
from .geo import BoundingBox, CellId, GeoPoint, PyramidConfig, cell_of, centroid, haversine_km, path_of
from .inference import TrainOptions, train
from .model import ModelConfig, ModelParams, alpha, beta, gamma, load, save
from .recsys import Query, Recommender, recommend

__version__ = "0.1.0"
