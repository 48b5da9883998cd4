"""Factor-model GWAS of high dimensional phenotypes from summary statistics."""

from .sumstats import PathwayHierarchy, RunConfig, SummaryStats

__all__ = ["PathwayHierarchy", "RunConfig", "SummaryStats"]
__version__ = "0.1.0"
