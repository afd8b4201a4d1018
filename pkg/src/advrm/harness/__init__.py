"""Experiment orchestration: configs, run manifests, pipeline stages, reports and the CLI."""
