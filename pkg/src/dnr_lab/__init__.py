"""Denoising reranker (DNR) experiments for retriever-reranker pipelines."""

__version__ = "0.1.0"
