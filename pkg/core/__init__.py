"""Stereo event-camera visual-inertial odometry building blocks."""
