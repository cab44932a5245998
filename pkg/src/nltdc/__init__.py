"""Non-linear off-policy TDC with exact diagnostics on tabular MDPs."""
