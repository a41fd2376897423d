"""HTTP service around the core package; see :mod:`hypershape.service.app`."""
