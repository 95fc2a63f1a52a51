"""Evaluation: pose metrics, clustering, rotation RMSE, detection and reconstruction."""
