"""Tests for riskmfg."""
