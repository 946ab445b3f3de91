"""Batch experiment harness: config parsing, scans, landscape, inversion."""
