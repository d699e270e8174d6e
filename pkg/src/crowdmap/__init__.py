"""Crowdsourced traffic-sign mapping.

Vehicles turn sign detections into projection lines in the North-East plane
(:mod:`crowdmap.onboard`); a server matches them to map landmarks and
re-triangulates each landmark over all its observations
(:mod:`crowdmap.matching`, :mod:`crowdmap.triangulate`,
:mod:`crowdmap.service`). :mod:`crowdmap.noise` and
:mod:`crowdmap.experiments` simulate passings and measure convergence.
"""

__version__ = "0.1.0"
