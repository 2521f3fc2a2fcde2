"""
OmniVL Desk Source Package

This package contains the core modules for desk-scale unified image/video-language
pretraining: encoders, decoders, objectives, corpus handling, trainer and evaluator.
"""

__version__ = "0.1.0"
