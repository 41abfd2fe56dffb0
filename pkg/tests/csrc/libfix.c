int fix_value(void)
{
    return 42;
}
