"""Fixed-point inference and quantization-aware fine-tuning emulation."""
