"""High-resolution vision-language model toy, cost model and analysis tools."""
