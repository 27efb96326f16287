# Mark tests as a package for relative imports in pytest.
