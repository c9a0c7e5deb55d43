"""Private mediator for atomic routing games with marginal-cost tolls."""
