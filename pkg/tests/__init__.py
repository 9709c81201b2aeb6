# Tests for dvae-trajectory
