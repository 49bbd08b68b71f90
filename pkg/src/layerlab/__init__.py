"""Layered image generation lab: synthetic scene data, a layer-conditional
denoiser with joint composite/background/foreground-effects targets, a
background curator, and an editing evaluation bench."""

__version__ = "0.1.0"
