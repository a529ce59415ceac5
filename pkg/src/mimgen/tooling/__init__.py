"""Dataset generation, image I/O, CLI and benchmarking."""
