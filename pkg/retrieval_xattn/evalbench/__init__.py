# Metrics, synthetic tasks, wall-clock scaling and retrieval-location analysis.
